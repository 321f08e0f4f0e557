use nalgebra::DMatrix;
use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};

use tagcl::config::RunConfig;
use tagcl::datagen::{generate_planted_tag, meta_path, write_dataset, GenConfig};
use tagcl::experiment::{link_eval, train_model};
use tagcl::graph::{build_matrices, matrices_from_adjacency, TextAttributedGraph};
use tagcl::ppr::{ppr_importance, sample_subgraph};
use tagcl::trainer::{EdgeSplits, TrainHistory};

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("nodes", "30"),
        ("p_in", "0.4"),
        ("p_out", "0.05"),
        ("tokens_per_node", "5"),
        ("vocab_per_community", "8"),
        ("dim", "4"),
        ("max_seq_len", "6"),
        ("max_epochs", "3"),
        ("batch_size", "10"),
        ("negatives_per_query", "5"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.tag");
    let cfg = GenConfig {
        nodes: 50,
        shared_fraction: 0.5,
        seed: 11,
        ..GenConfig::default()
    };
    let g = generate_planted_tag(&cfg).unwrap();
    write_dataset(&g, &cfg, &path).unwrap();
    let back = TextAttributedGraph::load(&path).unwrap();
    assert_eq!(back.to_tag_string(), g.to_tag_string());
    assert_eq!(back.labels(), g.labels());
    let meta = std::fs::read_to_string(meta_path(&path)).unwrap();
    assert_eq!(meta, cfg.to_meta());
}

#[test]
fn training_is_reproducible() {
    let cfg = tiny();
    let g = generate_planted_tag(&cfg.gen_config()).unwrap();
    let (s1, a) = train_model(&g, &cfg, &[]).unwrap();
    let (s2, b) = train_model(&g, &cfg, &[]).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(a.history.to_csv(), b.history.to_csv());
    assert_eq!(a.params, b.params);
    assert_eq!(
        link_eval(&g, &s1, &a.params, &cfg).unwrap(),
        link_eval(&g, &s2, &b.params, &cfg).unwrap()
    );

    // Saved artifacts parse back to the same values.
    assert_eq!(EdgeSplits::from_csv(&s1.to_csv()).unwrap(), s1);
    assert_eq!(
        TrainHistory::from_csv(&a.history.to_csv())
            .unwrap()
            .to_csv(),
        a.history.to_csv()
    );
}

#[test]
fn different_seeds_diverge() {
    let cfg = tiny();
    let other = RunConfig { seed: 1, ..cfg };
    let g = generate_planted_tag(&cfg.gen_config()).unwrap();
    let (_, a) = train_model(&g, &cfg, &[]).unwrap();
    let (_, b) = train_model(&g, &other, &[]).unwrap();
    assert_ne!(a.params, b.params);
}

/// Symmetric 0/1 adjacency from a bit list; a ring keeps it connected.
fn adjacency(n: usize, bits: &[bool]) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    let mut k = 0;
    for u in 0..n {
        for v in u + 1..n {
            let ring = v == u + 1 || (u == 0 && v == n - 1);
            if ring || bits[k % bits.len()] {
                a[(u, v)] = 1.0;
                a[(v, u)] = 1.0;
            }
            k += 1;
        }
    }
    a
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ppr_rows_are_distributions(
        n in 3usize..25,
        bits in prop::collection::vec(prop::bool::weighted(0.2), 1..64),
        alpha in 0.05f64..1.0,
    ) {
        let s = ppr_importance(&matrices_from_adjacency(adjacency(n, &bits)), alpha).unwrap();
        for row in s.scores.row_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-8);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn subgraphs_grow_by_prefix(
        n in 3usize..20,
        bits in prop::collection::vec(prop::bool::weighted(0.3), 1..64),
        center in 0usize..20,
    ) {
        let a = adjacency(n, &bits);
        let tokens = (0..n).map(|v| vec![format!("t{}", v % 3)]).collect();
        let edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .filter(|&(u, v)| a[(u, v)] == 1.0)
            .collect();
        let g = TextAttributedGraph::new((0..n).map(|v| format!("v{v}")).collect(), tokens, None, &edges).unwrap();
        let s = ppr_importance(&build_matrices(&g), 0.15).unwrap();
        let i = center % n;
        let mut prev = vec![i];
        for k in 1..=n {
            let sub = sample_subgraph(&g, &s, i, k).unwrap();
            prop_assert_eq!(sub.member_ids.len(), k);
            prop_assert_eq!(&sub.member_ids[..prev.len()], &prev[..]);
            for (x, &p) in sub.member_ids.iter().enumerate() {
                for (y, &q) in sub.member_ids.iter().enumerate() {
                    prop_assert_eq!(sub.adjacency[(x, y)], a[(p, q)]);
                }
            }
            prev = sub.member_ids.clone();
        }
    }
}
