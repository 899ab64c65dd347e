use privdistil::datamodel::{generate_sample, GroundTruth, ProcGenConfig, Split};

/// Nucleus count, mean equal-area radius, mean axis ratio.
fn stats(gt: &GroundTruth) -> [f64; 3] {
    let n = gt.nuclei.len() as f64;
    if n == 0.0 {
        return [0.0; 3];
    }
    let radius = gt.nuclei.iter().map(|c| (c.radii[0] * c.radii[1]).sqrt()).sum::<f64>() / n;
    let ratio = gt.nuclei.iter().map(|c| c.radii[0].min(c.radii[1]) / c.radii[0].max(c.radii[1])).sum::<f64>() / n;
    [n, radius, ratio]
}

/// Best single-feature threshold rule on `train`, exhaustively searched,
/// scored on `test`.
fn threshold_accuracy(train: &[([f64; 3], bool)], test: &[([f64; 3], bool)]) -> f64 {
    let mut best = (0.0, 0, 0.0, false);
    for f in 0..3 {
        for &(x, _) in train {
            let t = x[f];
            for flip in [false, true] {
                let acc = train.iter().filter(|(v, y)| ((v[f] > t) ^ flip) == *y).count() as f64 / train.len() as f64;
                if acc > best.0 {
                    best = (acc, f, t, flip);
                }
            }
        }
    }
    let (_, f, t, flip) = best;
    test.iter().filter(|(v, y)| ((v[f] > t) ^ flip) == *y).count() as f64 / test.len() as f64
}

#[test]
fn nucleus_only_pairs_are_separable_from_nucleus_statistics() {
    let cfg = ProcGenConfig::default();
    let pairs = cfg.nucleus_only_pairs();
    assert!(!pairs.is_empty());
    let collect = |split, n| -> Vec<(usize, [f64; 3])> {
        (0..n)
            .map(|i| {
                let g = generate_sample(&cfg, split, i).unwrap();
                (g.label, stats(&g.truth))
            })
            .collect()
    };
    let train = collect(Split::Train, 800);
    let test = collect(Split::Test, 400);
    for (a, b) in pairs {
        let pick = |rows: &[(usize, [f64; 3])]| -> Vec<([f64; 3], bool)> {
            rows.iter().filter(|(l, _)| *l == a || *l == b).map(|(l, x)| (*x, *l == b)).collect()
        };
        let acc = threshold_accuracy(&pick(&train), &pick(&test));
        assert!(acc > 0.95, "classes {a} and {b}: {acc}");
    }
}
