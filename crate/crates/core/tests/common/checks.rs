//! Small deterministic checks shared by the topic tests and the acceptance
//! suite. Each panics with a description on failure.

use usseg::eval::{make_folds, Confusion};
use usseg::net::{Mode, NetConfig, NetInput, Network};
use usseg::optim::{cyclic_lr, CyclicLr};
use usseg::sampler::{Axis, CenterSampler, Cube, Transform, TrainingSample};
use usseg::seed::stream;
use usseg::tensor::Tensor;
use usseg::{Geometry, Label, LabelMap, Mask};

use super::{random_tensor, rng};

pub fn default_input(net: &Network<f32>, n: usize, seed: u64) -> NetInput<f32> {
    let geom = net.geometry();
    let mut g = rng(seed);
    let pathways = net
        .config
        .factors
        .iter()
        .map(|&k| {
            let s = geom.side_for_stride(k);
            random_tensor([n, 1, s, s, s], &mut g, -1.0, 1.0).cast::<f32>()
        })
        .collect();
    NetInput { pathways }
}

/// Logit shape, the factor-5 pathway sizes, and stage-named shape errors.
pub fn shape_arithmetic() {
    let net = Network::<f32>::init(NetConfig::default(), &mut stream(1, &[0])).unwrap();
    let geom = net.geometry();
    assert_eq!((geom.normal_size, geom.sub_size), (25, 19));
    assert_eq!(net.config.widths.len(), 8);
    assert_eq!(net.config.factors, vec![1, 3, 5]);
    let head_kernels: Vec<usize> = net.head.iter().map(|b| b.kernel).collect();
    assert_eq!(head_kernels, vec![3, 1, 1]);

    let x = default_input(&net, 2, 2);
    assert_eq!(x.pathways.iter().map(|t| t.spatial()[0]).collect::<Vec<_>>(), vec![25, 19, 19]);
    let (logits, cache) = net.forward(&x, Mode::Train).unwrap();
    assert_eq!(logits.shape(), [2, 3, 7, 7, 7]);
    let sizes = cache.unwrap().pathway_sizes(2);
    let tail: Vec<usize> = sizes[sizes.len() - 3..].iter().map(|s| s[0]).collect();
    assert_eq!(tail, vec![3, 15, 9], "factor-5 pathway sizes {sizes:?}");
    assert!(sizes.iter().all(|s| s[0] == s[1] && s[1] == s[2]));

    for (p, side) in [(0, 23), (1, 17), (2, 21)] {
        let mut bad = x.clone();
        bad.pathways[p] = Tensor::zeros([2, 1, side, side, side]);
        let err = net.forward(&bad, Mode::Infer).unwrap_err().to_string();
        assert!(err.contains(&format!("pathway{p} input")), "{err}");
    }
    let mut missing = x.clone();
    missing.pathways.pop();
    assert!(net.forward(&missing, Mode::Infer).is_err());
}

pub fn lr_anchors() {
    let s = CyclicLr::default();
    let want = [(0, 1e-3f32), (800, 4.5e-3), (1600, 8e-3), (2400, 4.5e-3), (3200, 1e-3)];
    for (it, lr) in want {
        assert_eq!(cyclic_lr(it, &s), lr, "iteration {it}");
    }
}

/// A masked labelmap with 10% background, so a uniform draw would be far
/// from balanced.
pub fn skewed_case() -> (LabelMap, Mask) {
    let dims = [20, 20, 20];
    let n = 8000;
    let labels: Vec<u8> = (0..n).map(|i| if i % 10 == 0 { 0 } else { 1 + (i % 2) as u8 }).collect();
    let mask = Mask::new(dims, (0..n).map(|i| i % 7 != 3).collect()).unwrap();
    (LabelMap::new(Geometry::unit(dims), labels).unwrap(), mask)
}

/// Fraction of background-centered draws out of `draws`.
pub fn background_fraction(draws: usize, seed: u64) -> f64 {
    let (lm, mask) = skewed_case();
    let s = CenterSampler::new(&lm, &mask).unwrap();
    let mut g = stream(seed, &[0]);
    let mut bg = 0;
    for _ in 0..draws {
        let [x, y, z] = s.sample(&mut g);
        let idx = lm.geometry().index(x, y, z);
        assert!(mask.get(idx), "center outside the mask");
        bg += usize::from(lm.labels()[idx] == 0);
    }
    bg as f64 / draws as f64
}

pub fn random_sample(seed: u64) -> TrainingSample {
    let mut g = rng(seed);
    let cube = |side: usize, g: &mut rand_chacha::ChaCha8Rng| {
        Cube::new(side, random_tensor([1, 1, side, side, side], g, -1.0, 1.0).data().iter().map(|&v| v as f32).collect()).unwrap()
    };
    let patches = vec![cube(5, &mut g), cube(3, &mut g), cube(3, &mut g)];
    let target = Cube::new(3, (0..27).map(|i| ((i * 7 + seed as usize) % 3) as u8).collect()).unwrap();
    TrainingSample {
        patches,
        target,
        center: [4, 4, 4],
    }
}

/// Flips are involutions, four rotations are the identity, and no single
/// rotation is.
pub fn transform_involutions() {
    for seed in 0..5 {
        let s = random_sample(seed);
        for a in Axis::ALL {
            assert_eq!(s.apply(Transform::Flip(a)).apply(Transform::Flip(a)), s);
            assert_ne!(s.apply(Transform::Flip(a)), s);
            let mut r = s.clone();
            for turn in 1..=4 {
                r = r.apply(Transform::Rot90(a));
                if turn < 4 {
                    assert_ne!(r, s, "{a:?} turn {turn}");
                }
            }
            assert_eq!(r, s);
        }
    }
}

/// 27-voxel hand case with every count worked out on paper.
pub fn hand_confusion_case() -> (LabelMap, LabelMap) {
    let g = Geometry::unit([3, 3, 3]);
    let reference: Vec<u8> = (0..27).map(|i| (i / 9) as u8).collect();
    let mut pred = vec![0u8; 27];
    pred[7..17].fill(1);
    pred[17] = 2;
    pred[20..27].fill(2);
    (LabelMap::new(g.clone(), pred).unwrap(), LabelMap::new(g, reference).unwrap())
}

pub fn confusion_oracles() {
    let (pred, reference) = hand_confusion_case();
    let want = [
        (Label::Background, [7, 2, 2, 16], 14.0 / 18.0, 7.0 / 9.0, 16.0 / 18.0),
        (Label::GreyMatter, [8, 2, 1, 16], 16.0 / 19.0, 8.0 / 9.0, 16.0 / 18.0),
        (Label::WhiteMatter, [7, 1, 2, 17], 14.0 / 17.0, 7.0 / 9.0, 17.0 / 18.0),
    ];
    for (l, counts, dice, sens, spec) in want {
        let c = Confusion::count(&pred, &reference, l, None).unwrap();
        assert_eq!([c.tp, c.fp, c.fn_, c.tn], counts, "{l:?}");
        assert_eq!(c.dice(), dice, "{l:?}");
        assert_eq!(c.sensitivity(), sens, "{l:?}");
        assert_eq!(c.specificity(), spec, "{l:?}");
        assert_eq!(usseg::eval::dice(&pred, &reference, l, None).unwrap(), dice);
    }
    // perfect and empty cases
    let c = Confusion::count(&reference, &reference, Label::GreyMatter, None).unwrap();
    assert_eq!((c.dice(), c.sensitivity(), c.specificity()), (1.0, 1.0, 1.0));
    let none = LabelMap::filled(Geometry::unit([3, 3, 3]), Label::Background);
    let c = Confusion::count(&none, &none, Label::WhiteMatter, None).unwrap();
    assert_eq!(c.dice(), 1.0);
}

pub fn folds_of_23() {
    let ids: Vec<String> = (0..23).map(|i| format!("case{i:02}")).collect();
    for seed in [0, 1, 99] {
        let plan = make_folds(&ids, 5, seed).unwrap();
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![5, 5, 5, 4, 4]);
        let mut all: Vec<String> = plan.folds.concat();
        all.sort();
        assert_eq!(all, ids);
        assert_eq!(make_folds(&ids, 5, seed).unwrap(), plan);
    }
}
