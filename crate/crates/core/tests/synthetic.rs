//! Detector behavior on the generated benchmark data sets.

use tapudd::ensemble::{fit_tapudd, fit_tapudd_parallel, EnsembleConfig};
use tapudd::gmm::{assign, fit_gmm, FitConfig};
use tapudd::io::{decode, encode_binary, encode_text, FileKind};
use tapudd::stats::empirical_stats;
use tapudd::synth::{generate_synthetic, SyntheticSpec};
use tapudd::tapmb::fit_tapmb;
use tapudd::{ClusterStats, FeatureMatrix, Scorer};

fn sorted_by_x(clusters: &[ClusterStats]) -> Vec<&ClusterStats> {
    let mut v: Vec<&ClusterStats> = clusters.iter().collect();
    v.sort_by(|a, b| a.mean()[0].total_cmp(&b.mean()[0]));
    v
}

#[test]
fn empirical_stats_match_the_generator() {
    let d = generate_synthetic(&SyntheticSpec::binary(31)).unwrap();
    let labels = d.features.labels().unwrap().to_vec();
    let s = empirical_stats(&d.features, &labels, 0, 1e-9).unwrap();
    assert_eq!(s.count(), 3000);
    assert!((s.mean()[0] - 5.0).abs() < 0.1 && (s.mean()[1] - 8.0).abs() < 0.1);
    for (got, want) in s.covariance().data().iter().zip([1.0, -0.8, -0.8, 1.0]) {
        assert!((got - want).abs() < 0.15);
    }
}

#[test]
fn gmm_recovers_binary_clusters() {
    let f = generate_synthetic(&SyntheticSpec::binary(7)).unwrap().features;
    let g = fit_gmm(&f, 2, &FitConfig::with_seed(3)).unwrap();
    assert!(g.converged());
    let comps = sorted_by_x(g.components());
    for (c, want) in comps.iter().zip([[5.0, 8.0], [14.0, 8.0]]) {
        assert!((c.mean()[0] - want[0]).abs() < 0.2 && (c.mean()[1] - want[1]).abs() < 0.2);
    }
    let labels = assign(&g, &f).unwrap();
    let generator = f.labels().unwrap();
    let agree = labels.iter().zip(generator).filter(|(a, b)| a == b).count();
    // component order is arbitrary
    assert!(agree.min(6000 - agree) < 10);
}

#[test]
fn tapmb_clusters_follow_the_correlations() {
    let f = generate_synthetic(&SyntheticSpec::binary(8)).unwrap().features;
    let m = fit_tapmb(&f, 2, &FitConfig::with_seed(1)).unwrap();
    let c = sorted_by_x(m.clusters());
    assert!(c[0].covariance().get(0, 1) < -0.6);
    assert!(c[1].covariance().get(0, 1) > 0.6);
    let scores = m.score_batch(&f).unwrap();
    assert!(scores.iter().all(|&s| s <= 0.0));
}

#[test]
fn default_ensemble_on_binary_data() {
    let f = generate_synthetic(&SyntheticSpec::binary(9)).unwrap().features;
    let cfg = EnsembleConfig::default();
    let m = fit_tapudd(&f, &cfg, &FitConfig::with_seed(2)).unwrap();
    let ks: Vec<usize> = m.members().iter().map(|x| x.k()).collect();
    assert_eq!(ks, vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 16, 32]);
    let par = fit_tapudd_parallel(&f, &cfg, &FitConfig::with_seed(2), 4).unwrap();
    assert_eq!(m, par);
}

#[test]
fn repaired_multiclass_data_fits() {
    let d = generate_synthetic(&SyntheticSpec::multiclass(4)).unwrap();
    assert_eq!(d.provenance.repairs.iter().filter(|r| r.eigenvalues_clipped).count(), 3);
    let m = fit_tapmb(&d.features, 8, &FitConfig::with_seed(4)).unwrap();
    assert_eq!(m.clusters().iter().map(ClusterStats::count).sum::<usize>(), 4000);
}

#[test]
fn text_and_binary_encodings_score_identically() {
    let f = generate_synthetic(&SyntheticSpec::multiclass(5).with_count(100)).unwrap().features;
    let m = fit_tapmb(&f, 4, &FitConfig::with_seed(5)).unwrap();
    let (_, text) = decode(encode_text(&f, FileKind::Features).as_bytes()).unwrap();
    let (_, bin) = decode(&encode_binary(&f, FileKind::Features)).unwrap();
    let bits = |x: &FeatureMatrix| m.score_batch(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&text), bits(&f));
    assert_eq!(bits(&bin), bits(&f));
}
