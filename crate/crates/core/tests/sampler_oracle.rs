use gtpool_core::sampler::{
    brute_force_select, num_to_sample, rws, rwsv, select, SampleSpec, SamplerMethod, ScoreDistribution,
};
use proptest::prelude::*;

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-3f64..1.0, 1..=12)
}

fn method() -> impl Strategy<Value = SamplerMethod> {
    prop::sample::select(SamplerMethod::ALL.to_vec())
}

fn mu() -> impl Strategy<Value = f64> {
    prop::sample::select(vec![0.25, 0.5, 0.75, 1.0])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn select_matches_linear_oracle(raw in scores(), m in method(), mu in mu()) {
        let dist = ScoreDistribution::from_positive_scores(&raw).unwrap();
        let spec = SampleSpec::new(mu, m).unwrap();
        prop_assert_eq!(select(&dist, &spec).unwrap(), brute_force_select(&dist, &spec));
    }

    #[test]
    fn selection_shape(raw in scores(), m in method(), mu in mu()) {
        let dist = ScoreDistribution::from_positive_scores(&raw).unwrap();
        let idx = select(&dist, &SampleSpec::new(mu, m).unwrap()).unwrap();
        prop_assert_eq!(idx.len(), num_to_sample(raw.len(), mu));
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < raw.len()));
    }

    #[test]
    fn rwsv_is_nearest_cdf(raw in scores(), k in 0.0f64..1.0) {
        let dist = ScoreDistribution::from_positive_scores(&raw).unwrap();
        let i = rwsv(&dist, k).unwrap();
        let best = dist.cdf().iter().map(|c| (c - k).abs()).fold(f64::INFINITY, f64::min);
        prop_assert!(((dist.cdf()[i] - k).abs() - best).abs() < 1e-12);
    }

    #[test]
    fn rws_interval_contains_point(raw in scores(), k in 1e-9f64..1.0) {
        let dist = ScoreDistribution::from_positive_scores(&raw).unwrap();
        let i = rws(&dist, k).unwrap();
        let lo = if i == 0 { 0.0 } else { dist.cdf()[i - 1] };
        prop_assert!(lo < k && (k <= dist.cdf()[i] || i + 1 == raw.len()));
    }

    #[test]
    fn full_ratio_keeps_all(raw in scores(), m in method()) {
        let dist = ScoreDistribution::from_positive_scores(&raw).unwrap();
        let idx = select(&dist, &SampleSpec::new(1.0, m).unwrap()).unwrap();
        prop_assert_eq!(idx, (0..raw.len()).collect::<Vec<_>>());
    }
}

#[test]
fn ties_in_topk_prefer_lower_index() {
    let dist = ScoreDistribution::new(vec![0.25; 4]).unwrap();
    let spec = SampleSpec::new(0.5, SamplerMethod::TopK).unwrap();
    assert_eq!(select(&dist, &spec).unwrap(), vec![0, 1]);
    assert_eq!(brute_force_select(&dist, &spec), vec![0, 1]);
}

#[test]
fn uniform_scores_spread_evenly() {
    // Uniform pmf over 8 nodes, μ = 0.5: points 1/5..4/5 land on nodes 1, 3, 4, 6.
    let dist = ScoreDistribution::new(vec![0.125; 8]).unwrap();
    let rws_idx = select(&dist, &SampleSpec::new(0.5, SamplerMethod::Rws).unwrap()).unwrap();
    assert_eq!(rws_idx, vec![1, 3, 4, 6]);
    assert_eq!(rws_idx, brute_force_select(&dist, &SampleSpec::new(0.5, SamplerMethod::Rws).unwrap()));
}
