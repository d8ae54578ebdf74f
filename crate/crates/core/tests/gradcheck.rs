use rand::Rng;
use tsvr_core::head::{head_backward, head_forward, triplet_loss, HeadCache, HeadWeights, DEFAULT_NORM_EPS};
use tsvr_core::{seed, Tensor3};

const H: f64 = 1e-3;

struct Instance {
    weights: HeadWeights<f64>,
    features: [Tensor3<f64>; 3],
    margin: f64,
}

impl Instance {
    fn draw(rng: &mut impl Rng) -> Self {
        let c = rng.random_range(2..=4);
        let filters = rng.random_range(2..=8);
        let (h, w) = (rng.random_range(2..=6), rng.random_range(2..=6));
        let mut weights = HeadWeights::<f64>::init(c, filters, rng.random());
        for b in &mut weights.b {
            *b = rng.random_range(-0.1..0.1);
        }
        let features = [(); 3].map(|_| {
            let data = (0..c * h * w).map(|_| rng.random_range(0.0..2.0)).collect();
            Tensor3::from_vec(c, h, w, data).unwrap()
        });
        Self {
            weights,
            features,
            // Large enough that the hinge is active for most draws.
            margin: rng.random_range(1.0..3.0),
        }
    }

    fn caches(&self, w: &HeadWeights<f64>) -> [HeadCache<f64>; 3] {
        [0, 1, 2].map(|i| head_forward(w, &self.features[i], DEFAULT_NORM_EPS).unwrap().1)
    }

    fn loss(&self, w: &HeadWeights<f64>) -> f64 {
        let [a, p, n] = self.caches(w);
        triplet_loss(&a.embedding, &p.embedding, &n.embedding, self.margin).unwrap()
    }

    /// Central differences for every parameter, Richardson-extrapolated from
    /// steps `H` and `H/2`, or `None` when a step crosses a max-pool switch
    /// or the hinge.
    fn finite_differences(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let base: Vec<Vec<usize>> = self.caches(&self.weights).into_iter().map(|c| c.argmax).collect();
        if self.loss(&self.weights) < 1e-2 {
            return None;
        }
        let probe = |w: &HeadWeights<f64>| -> Option<f64> {
            let same = self.caches(w).iter().zip(&base).all(|(c, b)| &c.argmax == b);
            let l = self.loss(w);
            (same && l > 0.0).then_some(l)
        };
        let derivative = |nudge: &dyn Fn(&mut HeadWeights<f64>, f64)| -> Option<f64> {
            let central = |h: f64| -> Option<f64> {
                let (mut up, mut down) = (self.weights.clone(), self.weights.clone());
                nudge(&mut up, h);
                nudge(&mut down, -h);
                Some((probe(&up)? - probe(&down)?) / (2.0 * h))
            };
            Some((4.0 * central(H / 2.0)? - central(H)?) / 3.0)
        };
        let dw = (0..self.weights.w.data.len())
            .map(|i| derivative(&|w, h| w.w.data[i] += h))
            .collect::<Option<Vec<_>>>()?;
        let db = (0..self.weights.b.len())
            .map(|i| derivative(&|w, h| w.b[i] += h))
            .collect::<Option<Vec<_>>>()?;
        Some((dw, db))
    }
}

/// Per-parameter `|a − f| / max(|a|, |f|, 1e-6)`.
fn rel(a: &[f64], f: &[f64]) -> f64 {
    a.iter()
        .zip(f)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[test]
fn head_backward_matches_central_differences() {
    let mut worst = 0f64;
    for s in 0..25u64 {
        let mut rng = seed::rng(seed::derive_seed(s, "gradcheck"));
        let (inst, (fd_w, fd_b)) = (0..200)
            .find_map(|_| {
                let inst = Instance::draw(&mut rng);
                inst.finite_differences().map(|fd| (inst, fd))
            })
            .expect("a kink-free instance within 200 draws");
        let caches = inst.caches(&inst.weights);
        let g = head_backward(
            &inst.weights,
            [&caches[0], &caches[1], &caches[2]],
            [&inst.features[0], &inst.features[1], &inst.features[2]],
            inst.margin,
            DEFAULT_NORM_EPS,
        )
        .unwrap();
        worst = worst.max(rel(&g.dw, &fd_w)).max(rel(&g.db, &fd_b));
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn inactive_hinge_has_zero_gradient() {
    let mut rng = seed::rng(9);
    let inst = Instance::draw(&mut rng);
    let caches = inst.caches(&inst.weights);
    // Anchor and positive identical, margin zero: loss = −‖a−n‖² ≤ 0.
    let g = head_backward(
        &inst.weights,
        [&caches[0], &caches[0], &caches[2]],
        [&inst.features[0], &inst.features[0], &inst.features[2]],
        0.0,
        DEFAULT_NORM_EPS,
    )
    .unwrap();
    assert!(g.dw.iter().chain(&g.db).all(|&v| v == 0.0));
}
