use rand::Rng;
use tsvr_core::backbone::tiny_backbone;
use tsvr_core::head::{
    embed_ldvr, embed_pdvr, global_max_pool, head_forward, sgd_step, HeadWeights, DEFAULT_NORM_EPS,
};
use tsvr_core::{circular_shift, seed, FeatureMaps, RasterStyle, Tensor3, TimeSeries, Triplet};

fn roll_width<T: Copy + Default>(t: &Tensor3<T>, s: usize) -> Tensor3<T> {
    let mut out = Tensor3::from_vec(t.channels, t.height, t.width, vec![T::default(); t.data.len()]).unwrap();
    for c in 0..t.channels {
        for y in 0..t.height {
            for x in 0..t.width {
                out.set(c, y, (x + s) % t.width, t.get(c, y, x));
            }
        }
    }
    out
}

#[test]
fn gmp_is_invariant_to_circular_translation() {
    let mut rng = seed::rng(5);
    for _ in 0..50 {
        let (c, h, w) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(2..9));
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let z = Tensor3::from_vec(c, h, w, data).unwrap();
        let s = rng.random_range(1..w);
        let (g0, i0) = global_max_pool(&z);
        let (g1, i1) = global_max_pool(&roll_width(&z, s));
        assert_eq!(g0, g1);
        for (a, b) in i0.iter().zip(&i1) {
            assert_eq!((a % w + s) % w, b % w);
            assert_eq!(a / w, b / w);
        }
    }
}

#[test]
fn head_embedding_is_translation_invariant_away_from_the_border() {
    let mut rng = seed::rng(6);
    let weights = HeadWeights::<f32>::init(3, 8, 1);
    for _ in 0..20 {
        // A random blob in columns 2..6 of a 16-wide map; translating it
        // by up to 6 columns keeps every 3x3 window clear of the padding.
        let mut f = Tensor3::zeros(3, 5, 16);
        for c in 0..3 {
            for y in 0..5 {
                for x in 2..6 {
                    f.set(c, y, x, rng.random_range(0.0..1.0));
                }
            }
        }
        let s = rng.random_range(1..=6);
        let (e0, _) = head_forward(&weights, &f, DEFAULT_NORM_EPS).unwrap();
        let (e1, _) = head_forward(&weights, &roll_width(&f, s), DEFAULT_NORM_EPS).unwrap();
        assert_eq!(e0, e1);
    }
}

#[test]
fn sgd_steps_do_not_increase_the_loss() {
    let mut rng = seed::rng(7);
    let features: Vec<FeatureMaps> = (0..6)
        .map(|_| {
            let data = (0..4 * 5 * 5).map(|_| rng.random_range(0.0f32..2.0)).collect();
            Tensor3::from_vec(4, 5, 5, data).unwrap()
        })
        .collect();
    let batch: Vec<Triplet> = (0..4)
        .map(|i| Triplet {
            anchor: i,
            positive: (i + 1) % 6,
            negative: (i + 3) % 6,
        })
        .collect();
    let mut weights = HeadWeights::<f32>::init(4, 6, 3);
    let mut losses = Vec::new();
    for _ in 0..11 {
        losses.push(sgd_step(&mut weights, &batch, &features, 1.0, 1e-3, DEFAULT_NORM_EPS).unwrap());
    }
    assert!(losses[0] > 0.0);
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-7, "{losses:?}");
    }
}

#[test]
fn embeddings_have_unit_norm_and_length_independent_dim() {
    let bb = tiny_backbone(0);
    let style = RasterStyle::default();
    let weights = HeadWeights::<f32>::init(bb.output_channels(), 64, 2);
    let mut rng = seed::rng(8);
    let mut dims = Vec::new();
    for len in [24usize, 2709] {
        let values = (0..len).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let s = TimeSeries::new(values, "x", 0).unwrap();
        let l = embed_ldvr(&bb, &weights, &s, &style).unwrap();
        let p = embed_pdvr(&bb, &s, &style).unwrap();
        assert!((l.norm() - 1.0).abs() < 1e-5);
        assert!((p.norm() - 1.0).abs() < 1e-5);
        assert_eq!(p.dim(), 16);
        dims.push(l.dim());
        assert_eq!(embed_ldvr(&bb, &weights, &circular_shift(&s, 0), &style).unwrap(), l);
    }
    assert_eq!(dims, vec![64, 64]);
}

#[test]
fn constant_series_still_embeds_to_unit_norm() {
    let bb = tiny_backbone(0);
    let s = TimeSeries::new(vec![2.0; 50], "c", 0).unwrap();
    let p = embed_pdvr(&bb, &s, &RasterStyle::with_size(160, 120)).unwrap();
    assert!((p.norm() - 1.0).abs() < 1e-5);
}
