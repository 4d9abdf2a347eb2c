//! Acceptance criteria 1 to 12. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use supertransport::catalog;
use supertransport::cobar::{self, BarWord, Letter, SimplexTable};
use supertransport::forms::{contraction_d_residual, contraction_wedge_residual};
use supertransport::simplex::{self, Simplex};
use supertransport::superconn::{flatness_residuals, SampleGrid};
use supertransport::transport::{self, FamilyField, PathFamily};
use supertransport::{Chart, EndForm, ExprMatrix, GradedDims, GradedEndo, QuadSpec, ScalarExpr, Superconnection};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Outcome {
        Outcome { pass, detail: detail.into() }
    }
}

fn bounded(m: usize) -> Arc<Chart> {
    Arc::new(Chart::standard(m, Some(vec![(-1.0, 1.0); m])).unwrap())
}

fn rich() -> (Arc<Chart>, Superconnection) {
    let c = bounded(3);
    let d = catalog::unipotent_example(&c, 11).unwrap();
    (c, d)
}

/// `m = 2`, one-dimensional fibre, `A_1 = x2 dx1`: `dA_1 = −dx1∧dx2 ≠ 0`.
fn witness() -> (Arc<Chart>, Superconnection) {
    let c = bounded(2);
    let dims = GradedDims::shared([(0, 1)]).unwrap();
    let mut m = ExprMatrix::zero(1);
    m.set(0, 0, ScalarExpr::var("x2"));
    let a1 = EndForm::new(&c, &dims, 1, 0, [(0b01, m)]).unwrap();
    let d = Superconnection::new(&c, &dims, vec![EndForm::zero(&c, &dims, 0, 1), a1]).unwrap();
    (c, d)
}

fn with_scaled_a1(d: &Superconnection, s: f64) -> Superconnection {
    let mut comps = d.components().to_vec();
    comps[1] = comps[1].scale(s);
    Superconnection::new(d.chart(), d.dims(), comps).unwrap()
}

fn random_point(rng: &mut ChaCha8Rng, m: usize, r: f64) -> Vec<f64> {
    (0..m).map(|_| rng.gen_range(-r..r)).collect()
}

fn c1_matrix_exponentials() -> Outcome {
    let c = Arc::new(Chart::standard(1, None).unwrap());
    let path = PathFamily::parse(&c, 0, &["t"]).unwrap();
    let quad = QuadSpec::new(2000, 6, 2).unwrap();
    let mut cases: Vec<(&str, DMatrix<f64>, DMatrix<f64>)> = Vec::new();
    let n2 = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
    cases.push(("nilpotent 2x2", n2.clone(), DMatrix::identity(2, 2) + n2));
    let n3 = DMatrix::from_row_slice(3, 3, &[0.0, 1.5, -0.5, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
    cases.push(("nilpotent 3x3", n3.clone(), DMatrix::identity(3, 3) + &n3 + &n3 * &n3 * 0.5));
    let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.7, -1.3, 2.1]));
    let ediag = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.7f64.exp(), (-1.3f64).exp(), 2.1f64.exp()]));
    cases.push(("diagonal", diag, ediag));
    let mut worst: f64 = 0.0;
    for (_, cm, exact) in &cases {
        let n = cm.nrows();
        let dims = GradedDims::shared([(0, n)]).unwrap();
        let a1 = EndForm::constant(&c, 1, &GradedEndo::from_matrix(&dims, 0, cm.clone()).unwrap()).unwrap();
        let d = Superconnection::new(&c, &dims, vec![EndForm::zero(&c, &dims, 0, 1), a1]).unwrap();
        let phi = transport::transport_phi(&path, &[], 0.0, 1.0, &d, &quad).unwrap();
        worst = worst.max((phi.matrix() - exact).norm() / exact.norm());
    }
    Outcome::new(worst <= 1e-10, format!("max relative error {worst:.2e} over {} cases (tol 1e-10, N = 2000)", cases.len()))
}

fn c2_product_limit() -> Outcome {
    let c = bounded(2);
    let d = catalog::unipotent_example(&c, 3).unwrap();
    let path = catalog::random_path(&c, &[0.0, 0.1], &[0.5, -0.4], 3, 1).unwrap();
    let reference = transport::transport_phi(&path, &[], 0.0, 1.0, &d, &QuadSpec::new(4000, 6, 2).unwrap()).unwrap();
    let mut pts = Vec::new();
    for e in 4..=10 {
        let n = 1usize << e;
        let approx = transport::phi_product_limit(&path, &[], 0.0, 1.0, &d, &transport::uniform_partition(0.0, 1.0, n)).unwrap();
        let err = approx.sub(&reference).unwrap().op_norm();
        pts.push(((1.0 / n as f64).ln(), err.ln()));
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    Outcome::new(
        slope >= 0.9,
        format!(
            "fitted order {slope:.3} over meshes 2^-4..2^-10 (errors {:.2e} .. {:.2e}; need >= 0.9)",
            pts[0].1.exp(),
            pts[pts.len() - 1].1.exp()
        ),
    )
}

fn c3_series_ode_recursion() -> Outcome {
    let (c, d) = rich();
    let quad = QuadSpec::new(400, 6, 2).unwrap();
    let mut series_worst: f64 = 0.0;
    let mut rec_worst: f64 = 0.0;
    let start = [0.1, -0.2, 0.3];
    let end = [0.5, 0.2, -0.3];
    for k in 0..=2usize {
        let fam = catalog::random_family(&c, k, &start, &end, 20 + k as u64).unwrap();
        let params: Vec<Vec<f64>> = match k {
            0 => vec![vec![]],
            1 => transport::sample_params(1),
            _ => vec![vec![0.5, 0.5], vec![0.21, 0.83]],
        };
        for w in &params {
            let ode = transport::transport_phi(&fam, w, 0.0, 1.0, &d, &quad).unwrap();
            let series = transport::phi_series(&fam, w, 0.0, 1.0, &d, 1e-12).unwrap();
            series_worst = series_worst.max(ode.sub(&series.value).unwrap().op_norm());
            if k >= 1 {
                let psi = transport::transport_psi(&fam, w, 0.0, 1.0, &d, &quad, k).unwrap();
                for (p, v) in psi.iter().enumerate() {
                    let r = transport::psi_recursive(&fam, w, 0.0, 1.0, &d, &quad, p).unwrap();
                    rec_worst = rec_worst.max(v.sub(&r).unwrap().norm());
                }
            }
        }
    }
    Outcome::new(
        series_worst <= 1e-8 && rec_worst <= 1e-6,
        format!("series vs ODE {series_worst:.2e} (tol 1e-8); ODE vs recursion {rec_worst:.2e} (tol 1e-6), k = 0..2"),
    )
}

fn c4_flatness() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut points = 0;
    for m in 1..=3 {
        let c = bounded(m);
        for d in [
            catalog::unipotent_example(&c, 7).unwrap(),
            catalog::varying_example(&c, 5).unwrap(),
            catalog::gauge_example(&c).unwrap(),
        ] {
            let r = flatness_residuals(&d, &SampleGrid::Default).unwrap();
            worst = worst.max(r.overall);
            points = r.num_points;
        }
    }
    let (_, w) = witness();
    let wit = flatness_residuals(&w, &SampleGrid::Default).unwrap().overall;
    Outcome::new(
        worst <= 1e-10 && wit >= 0.5 && points == 1000,
        format!("flat max {worst:.2e} (tol 1e-10, 10^m grid, m = 1..3); witness {wit:.3} (need >= 0.5)"),
    )
}

fn c5_chain_map() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let quad = QuadSpec::default();
    let c = bounded(3);
    let flat = [catalog::varying_example(&c, 5).unwrap(), catalog::unipotent_example(&c, 11).unwrap()];
    let broken = with_scaled_a1(&flat[0], 1.5);
    let mut flat_worst: f64 = 0.0;
    let mut broken_min = f64::INFINITY;
    for i in 0..10 {
        let a = random_point(&mut rng, 3, 0.5);
        let b = random_point(&mut rng, 3, 0.5);
        let path = catalog::random_path(&c, &a, &b, 3, 100 + i).unwrap();
        for d in &flat {
            flat_worst = flat_worst.max(transport::check_chain_map(&path, &[], d, &quad).unwrap());
        }
        broken_min = broken_min.min(transport::check_chain_map(&path, &[], &broken, &quad).unwrap());
    }
    Outcome::new(
        flat_worst <= 1e-8 && broken_min >= 1e-2,
        format!("flat max {flat_worst:.2e} over 10 paths (tol 1e-8); broken A_1 min {broken_min:.2e} (need >= 1e-2)"),
    )
}

fn c6_stokes() -> Outcome {
    let quad = QuadSpec::default();
    let c = bounded(3);
    let d = catalog::varying_example(&c, 5).unwrap();
    let start = [0.0, 0.1, -0.1];
    let end = [0.4, -0.3, 0.2];
    let mut res = [0.0f64; 2];
    let mut lhs = [0.0f64; 2];
    for q in 1..=2usize {
        for seed in 0..2 {
            let fam = catalog::random_family(&c, q, &start, &end, 60 + seed).unwrap();
            let sides = transport::stokes_sides(&fam, &d, &quad, q).unwrap();
            res[q - 1] = res[q - 1].max(sides.residual());
            lhs[q - 1] = lhs[q - 1].max(sides.lhs.op_norm());
        }
    }
    let (wc, w) = witness();
    let fam = PathFamily::parse(&wc, 1, &["t", "0.5*w1*t*(1-t)"]).unwrap();
    let wit = transport::check_stokes(&fam, &w, &quad, 1).unwrap();
    Outcome::new(
        res[0] <= 1e-6 && res[1] <= 1e-5 && wit >= 1e-2 && lhs.iter().all(|l| *l > 1e-4),
        format!(
            "q=1 {:.2e} (tol 1e-6), q=2 {:.2e} (tol 1e-5), sides up to {:.2e}/{:.2e}; witness q=1 {wit:.2e} (need >= 1e-2)",
            res[0], res[1], lhs[0], lhs[1]
        ),
    )
}

fn c7_contraction_lemmas() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let c = bounded(3);
    let dims = catalog::three_term_dims();
    let pts: Vec<Vec<f64>> = (0..100).map(|_| random_point(&mut rng, 3, 1.0)).collect();
    let mut d_worst: f64 = 0.0;
    let mut w_worst: f64 = 0.0;
    let mut seed = 0;
    for p in 1..=3usize {
        let a = catalog::random_form(&c, &dims, p, 1 - p as i32, { seed += 1; seed }).unwrap();
        d_worst = d_worst.max(contraction_d_residual(&a, 2, &pts).unwrap());
        for q in 1..=3usize {
            let b = catalog::random_form(&c, &dims, q, 1 - q as i32, { seed += 1; seed }).unwrap();
            w_worst = w_worst.max(contraction_wedge_residual(&a, &b, 2, &pts).unwrap());
        }
    }
    Outcome::new(
        d_worst <= 1e-8 && w_worst <= 1e-8,
        format!("d(A/t) lemma {d_worst:.2e}, (A_pA_q)/t lemma {w_worst:.2e} at 100 points (tol 1e-8)"),
    )
}

fn c8_theta_geometry() -> Outcome {
    let start = Instant::now();
    let mut ok = true;
    let mut cases = 0;
    for k in 2..=4 {
        let r = simplex::check_face_lemmas(k).unwrap();
        ok &= r.holds();
        cases += r.cases;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let q = |n: i64, d: i64| BigRational::new(n.into(), d.into());
    let zero = q(0, 1);
    let one = q(1, 1);
    let mut vertex_ok = true;
    for k in 1..=4usize {
        for i in 0..=k {
            let v = simplex::vertex::<BigRational>(k, i);
            vertex_ok &= simplex::pi_k(&v).unwrap() == v;
        }
        for _ in 0..20 {
            let w: Vec<BigRational> = (0..k - 1)
                .map(|_| {
                    let d = rng.gen_range(1..=12);
                    q(rng.gen_range(0..=d), d)
                })
                .collect();
            vertex_ok &= simplex::theta(k, &w, &zero).unwrap() == simplex::vertex::<BigRational>(k, k);
            vertex_ok &= simplex::theta(k, &w, &one).unwrap() == simplex::vertex::<BigRational>(k, 0);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        ok && vertex_ok && secs <= 5.0,
        format!("face lemmas exact on {cases} cases (k = 2..4), vertex properties {vertex_ok}, {secs:.2} s (limit 5 s)"),
    )
}

fn corners() -> Vec<Vec<f64>> {
    vec![vec![0.1, -0.2, 0.3], vec![0.6, 0.1, -0.1], vec![0.2, 0.7, 0.2], vec![-0.3, 0.4, 0.6]]
}

fn c9_twisting() -> Outcome {
    let (c, d) = rich();
    let quad = QuadSpec::default();
    let pts = corners();
    let mut r = [0.0f64; 4];
    for k in 1..=3 {
        let s = Simplex::affine(&c, &pts[..=k]).unwrap();
        r[k] = simplex::twisting_residual(&s, &d, &quad).unwrap();
    }
    let tet = Simplex::affine(&c, &pts).unwrap();
    let doubled = QuadSpec { subdivisions: quad.subdivisions * 2, ..quad };
    let r_fine = simplex::twisting_residual(&tet, &d, &doubled).unwrap();

    let c2 = Arc::new(Chart::standard(2, None).unwrap());
    let dims = GradedDims::shared([(0, 1), (1, 1)]).unwrap();
    let mut delta = DMatrix::zeros(2, 2);
    delta[(1, 0)] = 1.0;
    let mut a2 = ExprMatrix::zero(2);
    a2.set(0, 1, ScalarExpr::parse("1 + x1").unwrap());
    let bad = Superconnection::new(
        &c2,
        &dims,
        vec![
            EndForm::constant(&c2, 0, &GradedEndo::from_matrix(&dims, 1, delta).unwrap()).unwrap(),
            EndForm::zero(&c2, &dims, 1, 0),
            EndForm::new(&c2, &dims, 2, -1, [(0b11, a2)]).unwrap(),
        ],
    )
    .unwrap();
    let tri = Simplex::affine(&c2, &[vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
    let wit = simplex::twisting_residual(&tri, &bad, &quad).unwrap();
    let halves = r_fine <= 0.5 * r[3];
    Outcome::new(
        r[1] <= 1e-6 && r[2] <= 1e-3 && r[3] <= 1e-3 && halves && wit >= 1e-2,
        format!(
            "k=1 {:.2e} (tol 1e-6), k=2 {:.2e}, k=3 {:.2e} (tol 1e-3); doubled nodes k=3 {r_fine:.2e} (ratio {:.3}, need <= 0.5); witness k=2 {wit:.2e}",
            r[1],
            r[2],
            r[3],
            r_fine / r[3]
        ),
    )
}

fn c10_ainfty() -> Outcome {
    let (_, d) = rich();
    let quad = QuadSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for len in 1..=2usize {
        for _ in 0..5 {
            let bary: Vec<Vec<f64>> = (0..=len).map(|_| random_point(&mut rng, 3, 0.6)).collect();
            worst = worst.max(simplex::ainfty_residual(&bary, &d, &quad).unwrap());
            count += 1;
        }
    }
    Outcome::new(worst <= 1e-3, format!("max residual {worst:.2e} over {count} chains of length 1-2 (tol 1e-3)"))
}

fn c11_cobar() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let words: Vec<BarWord> = (0..60).map(|_| cobar::random_word(&mut rng, 4)).collect();
    let max_deg = words.iter().map(BarWord::degree).max().unwrap_or(0);
    let failures = words.iter().filter(|w| !cobar::check_d_squared(w)).count();
    // exhaustive over every single-letter word with up to 6 vertices
    let mut exhaustive = 0;
    for n in 2..=6u32 {
        let w = BarWord::single(Letter::new(0, (0..n).collect()).unwrap());
        exhaustive += usize::from(!cobar::check_d_squared(&w));
    }

    let (c, d) = rich();
    let quad = QuadSpec::default();
    let p = corners();
    let mut table = SimplexTable::new();
    table.insert(0, Simplex::affine(&c, &p[..3]).unwrap(), vec![0, 1, 2]).unwrap();
    table.insert(1, Simplex::affine(&c, &p[2..]).unwrap(), vec![2, 3]).unwrap();
    table.insert(2, Simplex::affine(&c, &p).unwrap(), vec![10, 11, 12, 13]).unwrap();
    let l = |b: u32, v: &[u32]| Letter::new(b, v.to_vec()).unwrap();
    let test_words = [
        BarWord::single(l(0, &[0, 1, 2])),
        BarWord::new(vec![l(0, &[0, 1]), l(0, &[1, 2])]).unwrap(),
        BarWord::new(vec![l(0, &[0, 1, 2]), l(1, &[2, 3])]).unwrap(),
        BarWord::single(l(2, &[10, 11, 12, 13])),
        BarWord::new(vec![l(2, &[10, 11, 12]), l(2, &[12, 13])]).unwrap(),
    ];
    let mut dg_worst: f64 = 0.0;
    for w in &test_words {
        dg_worst = dg_worst.max(cobar::dg_functor_residual(w, &table, &d, &quad).unwrap());
    }
    Outcome::new(
        failures == 0 && exhaustive == 0 && words.len() >= 50 && max_deg <= 4 && dg_worst <= 1e-3,
        format!(
            "d^2 = 0 on {} random words (max degree {max_deg}) and 5 simplices; dg functor max {dg_worst:.2e} over {} words (tol 1e-3)",
            words.len(),
            test_words.len()
        ),
    )
}

fn c12_asymptotics() -> Outcome {
    let (c, d) = rich();
    let quad = QuadSpec::new(400, 6, 2).unwrap();
    let fam = catalog::random_family(&c, 1, &[0.1, -0.2, 0.3], &[0.5, 0.2, -0.3], 12).unwrap();
    let field = FamilyField::new(&fam, &d).unwrap();
    let w = [0.4];
    let hs = [0.02, 0.01, 0.005, 0.0025];
    let mut ratios = Vec::new();
    for p in 0..=1 {
        let rep = transport::infinitesimal_report(&field, &w, &quad, p, 0.3, &hs).unwrap();
        for pair in rep.residuals.windows(2) {
            ratios.push(pair[0].1 / pair[1].1);
        }
    }
    let ratios_ok = ratios.iter().all(|r| (3.0..=5.0).contains(r));
    let mut orders = Vec::new();
    for p in 0..=1 {
        let rep = transport::ds_report(&field, &w, &quad, p, 0.3, &transport::DS_STEPS).unwrap();
        orders.push(rep.order);
    }
    let orders_ok = orders.iter().all(|o| (o - 2.0).abs() <= 0.25);
    let fmt: Vec<String> = ratios.iter().map(|r| format!("{r:.2}")).collect();
    Outcome::new(
        ratios_ok && orders_ok,
        format!(
            "expansion error ratios under halving [{}] (need 3..5); d/ds orders [{:.2}, {:.2}] (need 2 +- 0.25)",
            fmt.join(", "),
            orders[0],
            orders[1]
        ),
    )
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 12] = [
        (1, "transport reproduces matrix exponentials", c1_matrix_exponentials),
        (2, "product limit converges linearly", c2_product_limit),
        (3, "series, ODE and recursion agree", c3_series_ode_recursion),
        (4, "flatness residuals", c4_flatness),
        (5, "chain-map identity", c5_chain_map),
        (6, "Stokes identity", c6_stokes),
        (7, "contraction lemmas", c7_contraction_lemmas),
        (8, "theta geometry", c8_theta_geometry),
        (9, "twisting cochain", c9_twisting),
        (10, "A-infinity relation", c10_ainfty),
        (11, "cobar differential and dg functor", c11_cobar),
        (12, "asymptotics and d/ds law", c12_asymptotics),
    ];
    let mut failed = 0;
    for (n, title, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        if !outcome.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {} {title}: {} [{:.1} s]",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of 12 criteria passed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
