use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use frictionlab::dual::{dual_ascent_tree, AscentOptions};
use frictionlab::friction::Penalty;
use frictionlab::limit_pde::{bs_closed_form, OptionKind};
use frictionlab::market_tree::MarketParams;
use frictionlab::payoffs::{AveragingRule, Claim, ClaimKind};
use frictionlab::primal::{
    superrep_exact, superrep_lattice, verify_superreplication, GammaGrid, PrimalOptions, Strategy,
};

fn market(n: usize) -> MarketParams<f64> {
    MarketParams::new(n, 0.2, 100.0).unwrap()
}

fn options() -> PrimalOptions<f64> {
    PrimalOptions::new(GammaGrid::new(-2.0, 2.0, 401).unwrap())
}

fn penalties() -> Vec<Penalty<f64>> {
    vec![
        Penalty::quadratic(0.5).unwrap(),
        Penalty::truncated_zero(0.1).unwrap(),
        Penalty::truncated_quadratic(0.5, 0.25).unwrap(),
        Penalty::proportional(0.05).unwrap(),
    ]
}

#[test]
fn closed_form_against_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let samples = 1_000_000;
    for vol in [0.2, 0.35] {
        let (mut sum, mut sum2, mut put_sum) = (0.0, 0.0, 0.0);
        for _ in 0..samples {
            let z: f64 = StandardNormal.sample(&mut rng);
            let s = 100.0 * (vol * z - 0.5 * vol * vol).exp();
            let c = (s - 105.0f64).max(0.0);
            sum += c;
            sum2 += c * c;
            put_sum += (105.0 - s).max(0.0);
        }
        let mean = sum / samples as f64;
        let se = ((sum2 / samples as f64 - mean * mean) / samples as f64).sqrt();
        let call = bs_closed_form(OptionKind::Call, 100.0, 105.0, vol).unwrap();
        assert!((call - mean).abs() < 4.0 * se, "vol {vol}: {call} vs {mean} +- {se}");
        let put = bs_closed_form(OptionKind::Put, 100.0, 105.0, vol).unwrap();
        assert!((put - put_sum / samples as f64).abs() < 8.0 * se);
    }
}

#[test]
fn exact_and_lattice_agree_on_terminal_claims() {
    for pen in penalties() {
        for claim in [Claim::call(100.0), Claim::put(105.0)] {
            for n in [1, 3, 6, 9] {
                let e = superrep_exact(&market(n), &pen, &claim, &options()).unwrap().value;
                let l = superrep_lattice(&market(n), &pen, &claim, &options()).unwrap().value;
                assert!((e - l).abs() < 1e-9, "{pen:?} n={n}: {e} vs {l}");
            }
        }
    }
}

#[test]
fn bucketed_asian_close_to_exact() {
    let claim = Claim::new(ClaimKind::AsianCall { strike: 100.0 }).with_averaging(AveragingRule::KnotMean);
    let pen = Penalty::quadratic(0.5).unwrap();
    let e = superrep_exact(&market(10), &pen, &claim, &options()).unwrap().value;
    let mut o = options();
    o.average_buckets = 401;
    let l = superrep_lattice(&market(10), &pen, &claim, &o).unwrap().value;
    assert!((e - l).abs() / e < 1e-2, "{e} vs {l}");
}

#[test]
fn friction_raises_the_price() {
    let claim = Claim::call(100.0);
    for n in [4, 16, 64] {
        let p = market(n);
        let v = |pen: Penalty<f64>| superrep_lattice(&p, &pen, &claim, &options()).unwrap().value;
        let free = v(Penalty::zero());
        let light = v(Penalty::quadratic(0.25).unwrap());
        let heavy = v(Penalty::quadratic(1.0).unwrap());
        assert!(free <= light + 1e-12 && light <= heavy + 1e-12, "n={n}: {free} {light} {heavy}");
    }
}

#[test]
fn ascent_dual_brackets_primal() {
    let claim = Claim::call(100.0);
    for n in [6, 8] {
        for pen in penalties() {
            let primal = superrep_exact(&market(n), &pen, &claim, &options()).unwrap().value;
            let dual = dual_ascent_tree(&market(n), &pen, &claim, None, &AscentOptions::default()).unwrap();
            assert!(dual.value <= primal + 1e-6, "{pen:?}: {} > {primal}", dual.value);
            assert!((primal - dual.value) / primal < 1e-3, "{pen:?}: {} vs {primal}", dual.value);
            if let Some(upper) = dual.upper_bound {
                assert!(upper >= dual.value && upper <= primal + 1e-6, "{pen:?}: upper {upper}");
            }
        }
    }
}

#[test]
fn strategy_survives_text_round_trip() {
    let pen = Penalty::truncated_quadratic(0.5, 0.25).unwrap();
    let claim = Claim::put(100.0);
    let p = market(7);
    let sol = superrep_exact(&p, &pen, &claim, &options()).unwrap();
    let strategy = sol.strategy();
    let back = Strategy::<f64>::from_text(&strategy.to_text()).unwrap();
    let a = verify_superreplication(&p, &pen, &strategy, &claim).unwrap();
    let b = verify_superreplication(&p, &pen, &back, &claim).unwrap();
    assert!(a.min_slack >= -1e-8);
    assert!((a.min_slack - b.min_slack).abs() < 1e-9);
    assert_eq!(a.paths, 128);
}
