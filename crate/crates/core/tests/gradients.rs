use kern_core::autodiff::{SparseMatrix, Tape, Var};
use kern_core::dataset::{AnnotatedImage, Triplet};
use kern_core::gradcheck::check_gradients;
use kern_core::knowledge::build_knowledge;
use kern_core::model::{Model, ModelConfig, ModelSpec};
use kern_core::synth::{build_process, generate, SynthConfig};
use kern_core::tensor::{init_rng, ParameterSet, Tensor};
use kern_core::trainer::{joint_loss, TrainConfig};
use rand::Rng;
use std::sync::Arc;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn random_param(params: &mut ParameterSet, name: &str, shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng) {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    params.insert(name, Tensor::new(shape.to_vec(), data).unwrap()).unwrap();
}

/// Checks `build` (which must return a scalar) against finite differences.
fn check(params: &ParameterSet, build: impl Fn(&mut Tape, &ParameterSet) -> Var) {
    let mut tape = Tape::new();
    let loss = build(&mut tape, params);
    let grads = tape.param_gradients(loss).unwrap();
    let report = check_gradients(params, &grads, EPS, |p| {
        let mut t = Tape::new();
        let l = build(&mut t, p);
        Ok(t.value(l).data()[0])
    })
    .unwrap();
    assert!(report.max_relative_error <= TOL, "{report:?}");
}

#[test]
fn elementary_ops_match_finite_differences() {
    let mut rng = init_rng(3);
    for _ in 0..5 {
        let mut p = ParameterSet::new();
        random_param(&mut p, "a", &[3, 4], &mut rng);
        random_param(&mut p, "b", &[4, 2], &mut rng);
        random_param(&mut p, "c", &[3, 2], &mut rng);
        random_param(&mut p, "r", &[2], &mut rng);
        let sparse = Arc::new(
            SparseMatrix::from_triplets(2, 3, vec![(0, 0, 0.5), (0, 2, -1.5), (1, 1, 2.0)]).unwrap(),
        );
        check(&p, |t, p| {
            let a = t.param(p, "a").unwrap();
            let b = t.param(p, "b").unwrap();
            let c = t.param(p, "c").unwrap();
            let r = t.param(p, "r").unwrap();
            let ab = t.matmul(a, b).unwrap();
            let x = t.add_row(ab, r).unwrap();
            let s = t.sigmoid(x).unwrap();
            let th = t.tanh(c).unwrap();
            let m = t.mul(s, th).unwrap();
            let d = t.sub(m, c).unwrap();
            let cat = t.concat_cols(&[d, s]).unwrap();
            let rows = t.concat_rows(&[cat, cat]).unwrap();
            let sm = t.softmax_rows(rows).unwrap();
            let lg = t.log(sm).unwrap();
            let sc = t.scale(lg, -0.3).unwrap();
            let re = t.reshape(sc, &[3, 8]).unwrap();
            let sp = t.spmm(sparse.clone(), re).unwrap();
            let ce = t.cross_entropy(sp, &[1, 5]).unwrap();
            let mean = t.mean(re).unwrap();
            let total = t.add(ce, mean).unwrap();
            let sq = t.mul(total, total).unwrap();
            t.sum(sq).unwrap()
        });
    }
}

fn desk_setup() -> (Model, kern_core::knowledge::KnowledgeBase, AnnotatedImage, Vec<Triplet>) {
    let synth = SynthConfig {
        num_categories: 4,
        num_predicates: 3,
        feature_dim: 5,
        images: 40,
        min_objects: 3,
        max_objects: 3,
        annotated_fraction: 0.5,
        ..SynthConfig::default()
    };
    let process = build_process(&synth).unwrap();
    let images = generate(&process, &synth).unwrap();
    let kb = build_knowledge(&images, &synth.schema()).unwrap();
    let config = ModelConfig {
        hidden_dim: 8,
        output_dim: 8,
        object_steps: 2,
        relation_steps: 2,
        max_regions: 64,
    };
    let spec = ModelSpec::new(&synth.schema(), 5, config);
    let mut model = Model::new(spec, 11).unwrap();
    // random biases so no gradient is structurally zero
    let mut rng = init_rng(5);
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let image = images.iter().find(|i| !i.triplets.is_empty()).unwrap().clone();
    assert_eq!(image.regions.len(), 3);
    let pairs: Vec<Triplet> = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .filter(|(i, j)| i != j)
        .map(|(subj, obj)| Triplet {
            subj,
            obj,
            predicate: image.predicate_of(subj, obj),
        })
        .collect();
    (model, kb, image, pairs)
}

#[test]
fn full_model_joint_loss_gradients() {
    let (model, kb, image, pairs) = desk_setup();
    let cfg = TrainConfig::default();
    let mut tape = Tape::new();
    let loss = joint_loss(&mut tape, &model, &kb, &image, &pairs, &cfg).unwrap().unwrap();
    let grads = tape.param_gradients(loss).unwrap();
    assert_eq!(grads.len(), model.params.len());
    let report = check_gradients(&model.params, &grads, EPS, |p| {
        let m = Model {
            spec: model.spec,
            params: p.clone(),
        };
        let mut t = Tape::new();
        let l = joint_loss(&mut t, &m, &kb, &image, &pairs, &cfg)?.unwrap();
        Ok(t.value(l).data()[0])
    })
    .unwrap();
    assert!(report.max_relative_error <= TOL, "{report:?}");
}

#[test]
fn region_free_image_has_no_loss() {
    let (model, kb, mut image, _) = desk_setup();
    image.regions.clear();
    image.triplets.clear();
    let mut tape = Tape::new();
    assert!(joint_loss(&mut tape, &model, &kb, &image, &[], &TrainConfig::default()).unwrap().is_none());
}
