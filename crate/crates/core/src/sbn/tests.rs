use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::tree::{enumerate_unrooted, parse_newick, random_unrooted, serialize_newick};

fn clade(taxa: &TaxaSet, names: &str) -> Clade {
    names.chars().fold(Clade::default(), |c, ch| c.union(Clade::singleton(taxa.index_of(&ch.to_string()).unwrap())))
}

fn random_phi(model: &mut SbnModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    model.phi.iter_mut().for_each(|p| *p = normal.sample(&mut rng));
}

fn full_model(n: usize, seed: u64) -> (Vec<TreeTopology>, SbnModel) {
    let trees = enumerate_unrooted(Arc::new(TaxaSet::letters(n))).unwrap();
    let mut model = SbnModel::uniform(Arc::new(build_support(&trees).unwrap()));
    random_phi(&mut model, seed);
    (trees, model)
}

#[test]
fn balanced_quartet_decomposition() {
    let t = parse_newick("((A,B),(C,D));", None).unwrap();
    let x = t.taxa().clone();
    let d = rooted_decomposition(&t).unwrap();
    assert_eq!(d[0], (None, Subsplit::new(clade(&x, "AB"), clade(&x, "CD"))));
    let rest: std::collections::BTreeSet<_> = d[1..].iter().copied().collect();
    let expect = [
        (Some(ParentKey { clade: clade(&x, "AB"), sibling: clade(&x, "CD") }), Subsplit::new(clade(&x, "A"), clade(&x, "B"))),
        (Some(ParentKey { clade: clade(&x, "CD"), sibling: clade(&x, "AB") }), Subsplit::new(clade(&x, "C"), clade(&x, "D"))),
    ];
    assert_eq!(rest, expect.into_iter().collect());
}

#[test]
fn caterpillar_decomposition() {
    let t = parse_newick("((A,(B,C)),D);", None).unwrap();
    let x = t.taxa().clone();
    let d = rooted_decomposition(&t).unwrap();
    let subsplits: Vec<_> = d.iter().map(|f| f.1).collect();
    assert_eq!(
        subsplits,
        vec![
            Subsplit::new(clade(&x, "ABC"), clade(&x, "D")),
            Subsplit::new(clade(&x, "A"), clade(&x, "BC")),
            Subsplit::new(clade(&x, "B"), clade(&x, "C")),
        ]
    );
    assert_eq!(d[2].0.unwrap(), ParentKey { clade: clade(&x, "BC"), sibling: clade(&x, "A") });
}

#[test]
fn decomposition_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [3, 4, 7, 20, 60] {
        let taxa = Arc::new(TaxaSet::numbered(n));
        let tree = random_unrooted(taxa.clone(), &mut rng).unwrap();
        for factors in rootings(&tree).unwrap() {
            let rooted = rebuild_rooted(&factors, taxa.clone()).unwrap();
            let mut again = rooted_decomposition(&rooted).unwrap();
            let mut orig = factors.clone();
            again.sort();
            orig.sort();
            assert_eq!(again, orig);
            assert_eq!(serialize_newick(&rooted.to_unrooted().unwrap()), serialize_newick(&tree));
        }
    }
}

#[test]
fn support_sizes_for_complete_quartet() {
    let (_, model) = full_model(4, 0);
    let s = &model.support;
    // 4 pendant splits and 3 interior ones, each as a root subsplit.
    assert_eq!(s.root_subsplits().len(), 7);
    assert_eq!(s.splits().len(), 7);
    assert_eq!(s.n_params(), s.root_subsplits().len() + s.n_parent_child_pairs());
}

#[test]
fn uniform_complete_quartet_is_uniform() {
    let trees = enumerate_unrooted(Arc::new(TaxaSet::letters(4))).unwrap();
    let model = SbnModel::uniform(Arc::new(build_support(&trees).unwrap()));
    for t in &trees {
        assert!((model.log_prob_unrooted(t).unwrap().exp() - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn normalized_over_complete_support() {
    for (n, seed) in [(4, 1), (5, 2), (6, 3)] {
        let (trees, model) = full_model(n, seed);
        let total: f64 = trees.iter().map(|t| model.log_prob_unrooted(t).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-10, "n={n} total={total}");
    }
}

#[test]
fn single_tree_support_has_probability_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tree = random_unrooted(Arc::new(TaxaSet::numbered(12)), &mut rng).unwrap();
    let mut model = SbnModel::uniform(Arc::new(build_support(std::slice::from_ref(&tree)).unwrap()));
    random_phi(&mut model, 4);
    assert!(model.log_prob_unrooted(&tree).unwrap().abs() < 1e-12);
    let other = random_unrooted(tree.taxa().clone(), &mut rng).unwrap();
    assert!(matches!(model.log_prob_unrooted(&other), Err(Error::OutOfSupport)));
}

#[test]
fn gradient_matches_finite_differences() {
    let (trees, model) = full_model(5, 6);
    let h = 1e-6;
    for t in trees.iter().step_by(4) {
        let (lp, g) = model.log_prob_grad_phi(t).unwrap();
        assert!((lp - model.log_prob_unrooted(t).unwrap()).abs() < 1e-12);
        for i in 0..model.phi.len() {
            let mut m = model.clone();
            m.phi[i] += h;
            let up = m.log_prob_unrooted(t).unwrap();
            m.phi[i] -= 2.0 * h;
            let down = m.log_prob_unrooted(t).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "param {i}: fd {fd} vs {}", g[i]);
        }
    }
}

#[test]
fn expected_score_vanishes() {
    let (trees, model) = full_model(5, 9);
    let mut acc = vec![0.0; model.phi.len()];
    for t in &trees {
        let (lp, g) = model.log_prob_grad_phi(t).unwrap();
        acc.iter_mut().zip(g).for_each(|(a, gi)| *a += lp.exp() * gi);
    }
    assert!(acc.iter().all(|a| a.abs() < 1e-10));
}

#[test]
fn sampler_matches_probabilities() {
    let (trees, model) = full_model(5, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let draws = 20_000;
    let mut counts: HashMap<String, usize> = HashMap::new();
    for _ in 0..draws {
        *counts.entry(serialize_newick(&model.sample_tree(&mut rng).unwrap())).or_default() += 1;
    }
    assert!(counts.len() <= trees.len());
    for t in &trees {
        let p = model.log_prob_unrooted(t).unwrap().exp();
        let f = counts.get(&serialize_newick(t)).copied().unwrap_or(0) as f64 / draws as f64;
        let sd = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((f - p).abs() < 4.0 * sd + 1e-9, "freq {f} vs prob {p}");
    }
}

#[test]
fn edge_keys_count_psps() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let tree = random_unrooted(Arc::new(TaxaSet::numbered(9)), &mut rng).unwrap();
    let sup = build_support(std::slice::from_ref(&tree)).unwrap();
    let keys = sup.edge_keys(&tree).unwrap();
    for (e, k) in keys.iter().enumerate() {
        let (x, y) = tree.edges()[e];
        let pendant = tree.is_leaf(x) || tree.is_leaf(y);
        assert_eq!(k.psps.len(), if pendant { 1 } else { 2 });
    }
    assert_eq!(sup.splits().len(), tree.n_edges());
}

#[test]
fn checkpoint_round_trip() {
    let (trees, model) = full_model(5, 14);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sbn.json");
    SbnCheckpoint::from_model(&model).save(&path).unwrap();
    let back = SbnCheckpoint::load(&path).unwrap().into_model().unwrap();
    assert_eq!(back.phi, model.phi);
    assert_eq!(back.support.psps(), model.support.psps());
    for t in &trees {
        assert_eq!(back.log_prob_unrooted(t).unwrap(), model.log_prob_unrooted(t).unwrap());
    }
    let mut bad = SbnCheckpoint::from_model(&model);
    bad.root_phi.pop();
    assert!(matches!(bad.into_model(), Err(Error::Checkpoint(_))));
}
