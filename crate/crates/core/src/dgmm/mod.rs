//! Low-rank Gaussian mixtures fitted by diagonally weighted moment matching.

mod fit;
mod kernel;
mod model;
mod moments;
mod params;

pub use moments::{
    bell_cross, bell_model, cross_term, cross_term_grad, cumulant, cumulant_grad, model_term, model_term_grad,
    model_terms, model_terms_with_grad, ParamGrad,
};
pub use fit::{
    dgmm_fit, dgmm_fit_precomputed, em_fit, kmeans_center_init, kmeans_init, kmeans_pp, lloyd, mixture_errors, naive_fit, noise_aware_fit, random_init,
    robust_fit, DgmmOptions, EmFit, EmOptions, MixtureErrors, MixtureEstimate,
};
pub use kernel::{PrecomputedMoments, EXACT_LIMIT};
pub use model::{order_weights_from_terms, DgmmModel, ORDER_WEIGHT_GUARD};
pub use params::{softmax, Layout, MixtureParams, UnconstrainedParams};
