use memlab::planner::*;

/// `max(n²/s, s²)` as an exact rational `max(n², s³) / s`.
fn cost(n: u128, s: u128) -> (u128, u128) {
    ((n * n).max(s * s * s), s)
}

/// Exhaustive integer minimizer; ties go to the larger `s`. Past the first
/// `s` with `s³ ≥ n²` the cost is `s²`, strictly increasing, so the scan
/// may stop there.
fn brute_force(n: usize) -> usize {
    let n = n as u128;
    let mut best = 1u128;
    for s in 1..=n {
        let (a, b) = cost(n, s);
        let (c, d) = cost(n, best);
        if a * d <= c * b {
            best = s;
        }
        if s * s * s >= n * n {
            break;
        }
    }
    best as usize
}

#[test]
fn optimal_chunks_matches_exhaustive_search() {
    for n in 1..=(1usize << 16) {
        let plan = optimal_chunks(n).unwrap();
        assert_eq!(plan.s, brute_force(n), "n = {n}");
        assert!(plan.s.abs_diff(plan.rounded) <= 1);
        let nn = n as u128;
        let (a, b) = cost(nn, plan.s as u128);
        for t in [plan.s.saturating_sub(1).max(1), (plan.s + 1).min(n)] {
            let (c, d) = cost(nn, t as u128);
            assert!(a * d <= c * b, "n = {n}, s = {}, neighbour {t}", plan.s);
        }
    }
}

#[test]
fn optimal_chunks_examples() {
    let p = optimal_chunks(4096).unwrap();
    assert_eq!((p.s, p.rounded), (256, 256));
    assert!((p.real - 256.0).abs() < 1e-9);

    let p = optimal_chunks(1024).unwrap();
    assert!((p.real - 101.59).abs() < 0.005);
    assert_eq!(p.rounded, 102);
    // 1024²/101 = 10381.9 < 102² = 10404.
    assert_eq!(p.s, 101);

    assert_eq!(optimal_chunks(1).unwrap().s, 1);
    assert_eq!(optimal_chunks(0), Err(PlanError::EmptyContext));
}

#[test]
fn cost_table_examples() {
    let rows = cost_table(4096, 512, &[1, 4, 256, 4096]).unwrap();
    assert_eq!(rows[0].encoder_cost, 4096.0 * 4096.0);
    assert_eq!(rows[0].decoder_cost, 1.0);
    assert_eq!(rows[2].encoder_cost, 65536.0);
    assert_eq!(rows[2].decoder_cost, 65536.0);
    assert_eq!(rows[2].parallel_encoder_cost, 256.0);
    assert_eq!(rows[2].cache_loads_per_token, 256.0 * 512.0);
    assert_eq!(rows[2].full_cache_loads_per_token, 4096.0 * 512.0);
    // The optimum total is 2·n^{4/3}.
    assert!((rows[2].total_cost - 2.0 * 4096f64.powf(4.0 / 3.0)).abs() < 1e-6);
    assert!(rows.iter().all(|r| r.warning.is_none() && r.encoder_cost > 0.0 && r.decoder_cost > 0.0));

    // The small s used in practice at n = 1024 costs far more compute but loads less cache.
    let practice = cost_table(1024, 1, &[4, 101]).unwrap();
    assert!(practice[0].total_cost > 2.5 * practice[1].total_cost);
    assert!(practice[0].cache_loads_per_token < practice[1].cache_loads_per_token);

    assert!(cost_table(10, 1, &[3]).unwrap()[0].warning.is_some());
    assert_eq!(cost_table(10, 1, &[11]), Err(PlanError::TooManyChunks { n: 10, s: 11 }));

    let tsv = to_tsv(&rows);
    assert_eq!(tsv.lines().count(), 5);
    assert!(tsv.lines().all(|l| l.split('\t').count() == 10));
}

proptest::proptest! {
    #[test]
    fn costs_are_monotone_in_s(n in 2usize..100_000, a in 1usize..1000, b in 1usize..1000) {
        let (a, b) = (a.min(n), b.min(n));
        proptest::prop_assume!(a < b);
        let rows = cost_table(n, 8, &[a, b]).unwrap();
        proptest::prop_assert!(rows[0].encoder_cost > rows[1].encoder_cost);
        proptest::prop_assert!(rows[0].decoder_cost < rows[1].decoder_cost);
        proptest::prop_assert_eq!(rows[0].encoder_cost, (n * n) as f64 / a as f64);
    }
}
