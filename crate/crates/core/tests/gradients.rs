use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgrgmm::dgmm::{
    cross_term, cross_term_grad, cumulant, cumulant_grad, model_term, model_term_grad, DgmmModel, Layout,
    MixtureParams, PrecomputedMoments,
};
use sgrgmm::engine::{Frozen, MomentModel};
use sgrgmm::weights::WeightVector;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;
const DRAWS: u64 = 50;

fn random_params(rng: &mut impl Rng, d: usize, k: usize, r: usize) -> MixtureParams {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mu = (0..k).map(|_| DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))).collect();
    let v = (0..k).map(|_| DMatrix::from_fn(d, r, |_, _| rng.random_range(-0.8..0.8))).collect();
    let noise = rng.random_range(0.0..0.3);
    MixtureParams::new(raw.iter().map(|x| x / s).collect(), mu, v, DMatrix::identity(d, d) * noise).unwrap()
}

/// Flat natural coordinates `(π, μ, vec V)`; π is perturbed without renormalizing.
fn flatten(p: &MixtureParams) -> DVector<f64> {
    let layout = Layout::of(p);
    let mut x = DVector::zeros(layout.dim());
    for j in 0..p.k() {
        x[j] = p.pi[j];
        x.rows_mut(layout.mu_offset(j), layout.d).copy_from(&p.mu[j]);
        x.rows_mut(layout.v_offset(j), p.v[j].len()).copy_from_slice(p.v[j].as_slice());
    }
    x
}

fn unflatten(x: &DVector<f64>, like: &MixtureParams) -> MixtureParams {
    let layout = Layout::of(like);
    MixtureParams {
        pi: (0..layout.k).map(|j| x[j]).collect(),
        mu: (0..layout.k).map(|j| x.rows(layout.mu_offset(j), layout.d).into_owned()).collect(),
        v: (0..layout.k)
            .map(|j| {
                let len = layout.d * layout.ranks[j];
                DMatrix::from_column_slice(layout.d, layout.ranks[j], &x.as_slice()[layout.v_offset(j)..][..len])
            })
            .collect(),
        sigma_xi: like.sigma_xi.clone(),
    }
}

fn central_diff(x: &DVector<f64>, f: impl Fn(&DVector<f64>) -> f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut a = x.clone();
        let mut b = x.clone();
        a[i] += H;
        b[i] -= H;
        (f(&a) - f(&b)) / (2.0 * H)
    })
}

fn rel_err(analytic: &DVector<f64>, numeric: &DVector<f64>) -> f64 {
    (analytic - numeric).norm() / numeric.norm().max(1e-8)
}

#[test]
fn model_term_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..DRAWS {
        let p = random_params(&mut rng, 4, 2, 2);
        let x = flatten(&p);
        for k in 1..=4 {
            let analytic = model_term_grad(&p, k).flatten(&Layout::of(&p));
            let numeric = central_diff(&x, |z| model_term(&unflatten(z, &p), k));
            worst = worst.max(rel_err(&analytic, &numeric));
        }
    }
    assert!(worst <= TOL, "worst relative error {worst:e}");
}

#[test]
fn cross_term_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..DRAWS {
        let p = random_params(&mut rng, 4, 2, 2);
        let y = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
        let x = flatten(&p);
        for k in 1..=4 {
            let analytic = cross_term_grad(&p, k, &y);
            let numeric = central_diff(&x, |z| cross_term(&unflatten(z, &p), k, &y));
            worst = worst.max(rel_err(&analytic, &numeric));
        }
    }
    assert!(worst <= TOL, "worst relative error {worst:e}");
}

#[test]
fn cumulant_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..DRAWS {
        let p = random_params(&mut rng, 4, 2, 2);
        let layout = Layout::of(&p);
        let x = flatten(&p);
        for l in 1..=6 {
            let (dmu, dv) = cumulant_grad(&p, 0, 1, l);
            let numeric = central_diff(&x, |z| cumulant(&unflatten(z, &p), 0, 1, l));
            let mut analytic = DVector::zeros(layout.dim());
            analytic.rows_mut(layout.mu_offset(1), 4).copy_from(&dmu);
            analytic.rows_mut(layout.v_offset(1), dv.len()).copy_from_slice(dv.as_slice());
            // only the second component's block moves
            let mut numeric_j = DVector::zeros(layout.dim());
            numeric_j.rows_mut(layout.mu_offset(1), 4).copy_from(&numeric.rows(layout.mu_offset(1), 4));
            numeric_j.rows_mut(layout.v_offset(1), 8).copy_from(&numeric.rows(layout.v_offset(1), 8));
            worst = worst.max(rel_err(&analytic, &numeric_j));

            // on the diagonal both slots move, doubling the partial
            let (dmu, dv) = cumulant_grad(&p, 1, 1, l);
            let numeric = central_diff(&x, |z| cumulant(&unflatten(z, &p), 1, 1, l));
            let mut analytic = DVector::zeros(layout.dim());
            analytic.rows_mut(layout.mu_offset(1), 4).copy_from(&(dmu * 2.0));
            analytic.rows_mut(layout.v_offset(1), dv.len()).copy_from_slice((dv * 2.0).as_slice());
            worst = worst.max(rel_err(&analytic, &numeric));
        }
    }
    assert!(worst <= TOL, "worst relative error {worst:e}");
}

fn random_frozen(rng: &mut impl Rng, model: &DgmmModel, theta: &DVector<f64>) -> Frozen {
    let n = model.n_obs();
    let weights: Vec<WeightVector> = (0..model.orders())
        .map(|_| {
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.8..1.0)).collect();
            let s: f64 = raw.iter().sum();
            WeightVector::from_values(raw.iter().map(|x| x / s).collect(), 0.3).unwrap()
        })
        .collect();
    let ow = model.order_weights(theta, &weights).unwrap();
    Frozen { constants: model.weight_constants(&weights).unwrap(), weights, order_weights: ow.values }
}

fn random_dgmm(rng: &mut impl Rng) -> (DgmmModel, DVector<f64>) {
    let y = DMatrix::from_fn(25, 4, |_, _| rng.random_range(-2.0..2.0));
    let noise = rng.random_range(0.0..0.3);
    let model =
        DgmmModel::new(PrecomputedMoments::new(&y, 4), 2, vec![2, 2], DMatrix::identity(4, 4) * noise).unwrap();
    let theta = DVector::from_fn(model.dim(), |_, _| rng.random_range(-1.0..1.0));
    (model, theta)
}

#[test]
fn robust_objective_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst: f64 = 0.0;
    for _ in 0..DRAWS {
        let (model, theta) = random_dgmm(&mut rng);
        let frozen = random_frozen(&mut rng, &model, &theta);
        let analytic = model.robust_gradient(&theta, &frozen).unwrap();
        let numeric = central_diff(&theta, |z| model.robust_objective(z, &frozen).unwrap());
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    assert!(worst <= TOL, "worst relative error {worst:e}");
}

#[test]
fn softmax_block_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst: f64 = 0.0;
    for _ in 0..DRAWS {
        let (model, theta) = random_dgmm(&mut rng);
        let frozen = random_frozen(&mut rng, &model, &theta);
        let analytic = model.robust_gradient(&theta, &frozen).unwrap().rows(0, 2).into_owned();
        let numeric = central_diff(&theta, |z| model.robust_objective(z, &frozen).unwrap()).rows(0, 2).into_owned();
        let scale = model.robust_gradient(&theta, &frozen).unwrap().norm().max(1.0);
        worst = worst.max((analytic - numeric).amax() / scale);
    }
    assert!(worst <= 1e-6, "worst logit-block error {worst:e}");
}
