use aesthete::attention::{mean_attention_distance, mean_attention_entropy, AttentionMap};
use aesthete::losses::{alignment_loss, emd_raw, tensor, AlignmentConfig};
use aesthete::metrics::{plcc, srcc, EvalPair};
use candle_core::{Device, Tensor};
use proptest::prelude::*;

fn simplex(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, d).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    })
}

fn row_tensor(rows: &[Vec<f64>]) -> Tensor {
    let d = rows[0].len();
    let flat: Vec<f64> = rows.concat();
    Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn emd_is_a_metric(p in simplex(10), q in simplex(10), s in simplex(10), r in prop::sample::select(vec![1.0, 1.5, 2.0, 3.0])) {
        let pq = emd_raw(&p, &q, r);
        prop_assert!(pq >= 0.0);
        prop_assert!((pq - emd_raw(&q, &p, r)).abs() < 1e-12);
        prop_assert!(emd_raw(&p, &p, r) == 0.0);
        prop_assert!(pq <= emd_raw(&p, &s, r) + emd_raw(&s, &q, r) + 1e-12);
    }

    #[test]
    fn batched_emd_matches_slices(rows in prop::collection::vec((simplex(6), simplex(6)), 1..6), r in prop::sample::select(vec![1.0, 2.0, 2.5])) {
        let (p, q): (Vec<_>, Vec<_>) = rows.iter().cloned().unzip();
        let got: Vec<f64> = tensor::emd(&row_tensor(&p), &row_tensor(&q), r).unwrap().to_vec1().unwrap();
        for (i, (a, b)) in rows.iter().enumerate() {
            prop_assert!((got[i] - emd_raw(a, b, r)).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_is_scale_free(x in prop::collection::vec(-3.0f64..3.0, 8), y in prop::collection::vec(-3.0f64..3.0, 8), a in 0.1f64..10.0) {
        prop_assume!(x.iter().any(|v| v.abs() > 0.1) && y.iter().any(|v| v.abs() > 0.1));
        let cfg = AlignmentConfig::default();
        let l = alignment_loss(&x, &y, &cfg).unwrap();
        prop_assert!((0.0..=2.0).contains(&l));
        let scaled: Vec<f64> = x.iter().map(|v| v * a).collect();
        prop_assert!((alignment_loss(&scaled, &y, &cfg).unwrap() - l).abs() < 1e-12);
        let batched: Vec<f64> = tensor::alignment_loss(&row_tensor(std::slice::from_ref(&x)), &row_tensor(std::slice::from_ref(&y)), cfg.epsilon)
            .unwrap()
            .to_vec1()
            .unwrap();
        prop_assert!((batched[0] - l).abs() < 1e-12);
    }

    #[test]
    fn correlations_ignore_affine_maps(v in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 4..40), a in 0.5f64..4.0, b in -5.0f64..5.0) {
        let pairs: Vec<EvalPair> = v.iter().map(|&(p, t)| EvalPair::new(p, t)).collect();
        let moved: Vec<EvalPair> = v.iter().map(|&(p, t)| EvalPair::new(a * p + b, t)).collect();
        if let (Ok(s0), Ok(s1)) = (srcc(&pairs), srcc(&moved)) {
            prop_assert!((s0 - s1).abs() < 1e-9);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s0));
        }
        if let (Ok(p0), Ok(p1)) = (plcc(&pairs), plcc(&moved)) {
            prop_assert!((p0 - p1).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_bounds(h in 1usize..3, gy in 1usize..5, gx in 1usize..5, cls in any::<bool>(), seed in prop::collection::vec(0.01f64..1.0, 1024)) {
        let n = gy * gx + usize::from(cls);
        let mut w = Vec::with_capacity(h * n * n);
        for row in seed.chunks(n).cycle().take(h * n) {
            let mut row = row.to_vec();
            row.resize(n, 0.5);
            let s: f64 = row.iter().sum();
            w.extend(row.into_iter().map(|x| x / s));
        }
        let map = AttentionMap::new(w, h, (gy, gx), cls).unwrap();
        let ent = mean_attention_entropy(&map).unwrap();
        prop_assert!(ent >= 0.0 && ent <= (n as f64).ln() + 1e-12);
        let (dist, std) = mean_attention_distance(&map).unwrap();
        let diag = (((gy - 1).pow(2) + (gx - 1).pow(2)) as f64).sqrt();
        prop_assert!(dist >= 0.0 && dist <= diag + 1e-12 && std >= 0.0);
    }
}
