//! The eight acceptance criteria. Prints one line per criterion and exits
//! non-zero if any fails.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waveletnet::complexity::{closed_form, report, ClosedFormKind};
use waveletnet::models::{build, HeadKind, ModelConfig};
use waveletnet::nn::Module;
use waveletnet::ops::dfwt;
use waveletnet::train::{ablation_pair, ToyProfile};
use waveletnet::verify::{
    gradient_check, reference_inverted_residual, GradProbe, GRAD_EPS, GRAD_TOL,
};
use waveletnet::{
    adjacency_of_dfwt, adjacency_of_wconv, build_cifar, compose, haar_matrix,
    minimality_exhaustive, minimality_lower_bound, Shape, SignConvention, Tensor, UnitSpec,
    WaveletUnit,
};

const A8: [[u8; 8]; 8] = [
    [1, 1, 1, 1, 0, 0, 0, 0],
    [0, 0, 0, 0, 1, 1, 0, 0],
    [0, 0, 0, 0, 0, 0, 1, 0],
    [0, 0, 0, 0, 0, 0, 1, 0],
    [0, 0, 0, 0, 0, 0, 0, 1],
    [0, 0, 0, 0, 0, 0, 0, 1],
    [0, 0, 0, 0, 0, 0, 0, 1],
    [0, 0, 0, 0, 0, 0, 0, 1],
];

const H8: [[i32; 8]; 8] = [
    [1, 0, 0, 0, -1, 0, 0, 0],
    [0, 1, 0, 0, 0, -1, 0, 0],
    [0, 0, 1, 0, 0, 0, -1, 0],
    [0, 0, 0, 1, 0, 0, 0, -1],
    [1, 0, -1, 0, 1, 0, -1, 0],
    [0, 1, 0, -1, 0, 1, 0, -1],
    [1, -1, 1, -1, 1, -1, 1, -1],
    [1, 1, 1, 1, 1, 1, 1, 1],
];

struct Outcome {
    passed: bool,
    detail: String,
}

type Criterion = (fn() -> Outcome, Option<Duration>);

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want
}

fn criterion_1() -> Outcome {
    // (width, κ, params M, MACs M)
    let rows = [
        (1.0, 3, 2.72, 216.0),
        (0.75, 3, 1.79, 140.0),
        (1.25, 3, 3.82, 327.0),
        (1.0, 5, 2.60, 204.0),
    ];
    let mut lines = Vec::new();
    let mut passing = Vec::new();
    for head in [HeadKind::Dense, HeadKind::Wconv] {
        let params = |w: f64, k: u32| {
            let mut c = ModelConfig::imagenet(w, k, 6);
            c.head = head;
            report(&build(&c).unwrap())
        };
        let mut ok = true;
        let mut cells = Vec::new();
        for (w, k, p, m) in rows {
            let r = params(w, k);
            let (gp, gm) = (r.total_params as f64 / 1e6, r.total_macs as f64 / 1e6);
            ok &= within(gp, p, 0.10) && within(gm, m, 0.10);
            cells.push(format!("w={w} κ={k} {gp:.2}M/{gm:.0}M"));
        }
        let (p5, p3, p0) = (
            params(1.0, 5).total_params,
            params(1.0, 3).total_params,
            params(1.0, 0).total_params,
        );
        let ordered = p5 < p3 && p3 < p0;
        ok &= ordered;
        lines.push(format!(
            "{head:?} head [{}] order {}",
            cells.join(", "),
            if ordered { "ok" } else { "broken" }
        ));
        if ok {
            passing.push(format!("{head:?}"));
        }
    }
    outcome(
        !passing.is_empty(),
        format!("passing readings {passing:?}; {}", lines.join("; ")),
    )
}

fn criterion_2() -> Outcome {
    let mut full = true;
    let mut nnz = true;
    for k in 2..=8u32 {
        let d = 1usize << k;
        for kappa in 1..=k {
            full &= compose(
                &adjacency_of_wconv(d, d, kappa).unwrap(),
                &adjacency_of_dfwt(d, kappa).unwrap(),
            )
            .unwrap()
            .is_full();
        }
        nnz &= adjacency_of_wconv(d, d, k).unwrap().nnz() == d + d / 4 * (k as usize - 1);
    }
    let a8: Vec<Vec<u8>> = A8.iter().map(|r| r.to_vec()).collect();
    let literal = adjacency_of_wconv(8, 8, 3).unwrap().to_rows() == a8;
    outcome(
        full && nnz && literal,
        format!("composition full {full}, nnz formula {nnz}, D=8 matrix {literal}"),
    )
}

fn criterion_3() -> Outcome {
    let ex = minimality_exhaustive(4).unwrap();
    let haar = adjacency_of_dfwt(4, 2).unwrap().nnz();
    let bound = minimality_lower_bound(&adjacency_of_wconv(4, 4, 2).unwrap());
    outcome(
        ex.minimum == 12 && haar == 12 && bound == 12,
        format!(
            "exhaustive minimum {}, nnz |H_4| {haar}, lower bound {bound}, {} minimizers",
            ex.minimum, ex.minimizers
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for d in [4usize, 8, 16, 64] {
        for kappa in 0..=d.trailing_zeros() {
            for sign in [SignConvention::Algorithm2, SignConvention::Matrix] {
                let h = haar_matrix(d, kappa, sign).unwrap();
                let x: Tensor<f32> =
                    Tensor::from_fn(Shape::new(100, 1, 1, d), |_| rng.random_range(-1.0..1.0));
                let y = dfwt(&x, kappa, sign).unwrap();
                for (src, dst) in x.data().chunks(d).zip(y.data().chunks(d)) {
                    let src: Vec<f64> = src.iter().map(|v| *v as f64).collect();
                    for (a, b) in dst.iter().zip(h.apply(&src)) {
                        worst = worst.max((*a as f64 - b).abs());
                    }
                }
                cases += 1;
            }
        }
    }
    let out = Command::new(env!("CARGO_BIN_EXE_waveletnet"))
        .args(["haar", "--d", "8", "--kappa", "3", "--sign", "matrix"])
        .output()
        .expect("binary runs");
    let shown: Vec<Vec<i32>> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| {
            l.split_whitespace()
                .filter_map(|t| t.parse().ok())
                .collect()
        })
        .collect();
    let exact = out.status.success() && shown == H8.iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    outcome(
        worst <= 1e-6 && exact,
        format!("{cases} (D, κ, sign) cases × 100 inputs, max abs diff {worst:.2e}; CLI H_8 exact {exact}"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut counts = true;
    for (d, dp, t, stride) in [
        (16, 16, 6, 1),
        (16, 24, 6, 2),
        (32, 32, 1, 1),
        (24, 32, 4, 1),
    ] {
        let spec = UnitSpec::new(d, dp, t, (0, 0, 0), stride).unwrap();
        let mut unit = WaveletUnit::<f32>::init(spec, &mut rng).unwrap();
        for bn in unit.batch_norms_mut() {
            bn.running_mean
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
            bn.running_var
                .iter_mut()
                .for_each(|v| *v = rng.random_range(0.5..2.0));
        }
        let x: Tensor<f32> =
            Tensor::from_fn(Shape::new(2, 6, 6, d), |_| rng.random_range(-1.0..1.0));
        let got = unit.forward(&x).unwrap();
        let want = reference_inverted_residual(&unit, &x).unwrap();
        worst = worst.max(got.max_abs_diff(&want) as f64);

        let h = d * t;
        let mut dense = closed_form(ClosedFormKind::Dwconv3x3, 1, h, h, 0)
            .unwrap()
            .params
            + closed_form(ClosedFormKind::Conv1x1, 1, h, dp, 0)
                .unwrap()
                .params;
        if t > 1 {
            dense += closed_form(ClosedFormKind::Conv1x1, 1, d, h, 0)
                .unwrap()
                .params;
        }
        let weights: usize = unit
            .parameters()
            .into_iter()
            .filter(|(k, _)| *k == waveletnet::nn::ParamKind::Weight)
            .map(|(_, p)| p.numel())
            .sum();
        counts &= weights as f64 == dense;
    }
    outcome(
        worst <= 1e-6 && counts,
        format!("max abs diff {worst:.2e}; weight counts equal dense closed forms {counts}"),
    )
}

fn criterion_6() -> Outcome {
    let probes = [
        GradProbe::wconv(60, 8, 8, 0).unwrap(),
        GradProbe::wconv(61, 8, 8, 1).unwrap(),
        GradProbe::wconv(63, 8, 8, 3).unwrap(),
        GradProbe::dfwt(64, 8, 3, SignConvention::Algorithm2).unwrap(),
        GradProbe::unit(65, UnitSpec::new(8, 8, 6, (0, 3, 3), 1).unwrap()).unwrap(),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, p) in probes.iter().enumerate() {
        let c = gradient_check(p, GRAD_EPS, 600 + i as u64).unwrap();
        ok &= c.passed(GRAD_TOL);
        parts.push(format!(
            "{} {:.1e} ({} kink crossings excluded, raw {:.1e})",
            c.name, c.max_rel_error, c.kink_crossings, c.raw_rel_error
        ));
    }
    outcome(ok, parts.join("; "))
}

fn criterion_7() -> Outcome {
    let mut halved = 0;
    let mut wins = 0;
    let mut slowest = Duration::ZERO;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let t0 = Instant::now();
        let p = ToyProfile::synth(seed);
        let (tr, te) = p.datasets().unwrap();
        let pair = ablation_pair(&p.model, &p.train, &tr, &te, seed).unwrap();
        slowest = slowest.max(t0.elapsed());
        let h = pair.with_dfwt.halved();
        halved += h as usize;
        let win = pair.with_dfwt_err <= pair.without_dfwt_err;
        wins += win as usize;
        parts.push(format!(
            "seed {seed}: loss {:.2}->{:.2} halved {h}, error {:.1}% vs {:.1}% without",
            pair.with_dfwt.initial_loss().unwrap_or(f64::NAN),
            pair.with_dfwt.final_loss(25).unwrap_or(f64::NAN),
            pair.with_dfwt_err,
            pair.without_dfwt_err
        ));
    }
    let fast = slowest < Duration::from_secs(600);
    outcome(
        halved == 3 && wins >= 2 && fast,
        format!(
            "halved {halved}/3, with-DFWT no worse {wins}/3, slowest pair {:.0}s; {}",
            slowest.as_secs_f64(),
            parts.join("; ")
        ),
    )
}

fn criterion_8() -> Outcome {
    let arch = build_cifar(24, 1.0).unwrap();
    let layers = arch.conv_layer_count();
    let params = report(&arch).total_params as f64 / 1e6;
    outcome(
        layers == 218 && within(params, 1.10, 0.15),
        format!("{layers} counted conv layers, {params:.3}M params"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (criterion_1, Some(Duration::from_secs(10))),
        (criterion_2, Some(Duration::from_secs(1))),
        (criterion_3, Some(Duration::from_secs(10))),
        (criterion_4, Some(Duration::from_secs(30))),
        (criterion_5, None),
        (criterion_6, Some(Duration::from_secs(120))),
        (criterion_7, None),
        (criterion_8, None),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (f, limit)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t0 = Instant::now();
        let mut r = f();
        let elapsed = t0.elapsed();
        if let Some(limit) = limit {
            if elapsed >= *limit {
                r.passed = false;
                r.detail
                    .push_str(&format!("; over the {:.0}s budget", limit.as_secs_f64()));
            }
        }
        failed += !r.passed as usize;
        println!(
            "criterion {n}: {} ({:.2}s) {}",
            if r.passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            r.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
