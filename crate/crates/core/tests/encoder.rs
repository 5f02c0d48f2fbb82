//! Content encoder against a ridge-regression oracle.

use diffattack_core::encoder::{encode, train_encoder, EncoderHyper};
use diffattack_core::grad::Tensor;
use diffattack_core::rng::seeded;
use diffattack_core::world::{generate_world, make_dataset, Dataset, WorldConfig};
use nalgebra::DMatrix;

fn dataset(cfg: WorldConfig) -> Dataset {
    let world = generate_world(&cfg).unwrap();
    make_dataset(&world, 40, 0.75, &mut seeded(3)).unwrap()
}

fn with_bias(x: &Tensor) -> DMatrix<f64> {
    let (n, d) = (x.rows(), x.cols());
    DMatrix::from_fn(n, d + 1, |i, j| if j < d { x.row(i)[j] } else { 1.0 })
}

fn to_na(x: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(x.rows(), x.cols(), x.data())
}

/// Held-out per-element MSE of the best affine map (ridge 1e−6).
fn ridge_heldout_mse(ds: &Dataset) -> f64 {
    let train = ds.train_frames().unwrap();
    let test = ds.test_frames().unwrap();
    let a = with_bias(&train.x);
    let gram = a.transpose() * &a + DMatrix::identity(a.ncols(), a.ncols()) * 1e-6;
    let w = gram.lu().solve(&(a.transpose() * to_na(&train.xbar0))).unwrap();
    let resid = with_bias(&test.x) * w - to_na(&test.xbar0);
    resid.norm_squared() / (resid.nrows() * resid.ncols()) as f64
}

#[test]
fn encoder_strips_offsets() {
    let cfg = WorldConfig { warp_strength: 0.0, obs_noise: 0.0, seed: 2, ..Default::default() };
    let ds = dataset(cfg.clone());
    let ridge = ridge_heldout_mse(&ds);
    let trained = train_encoder(&ds, &EncoderHyper { steps: 2000, ..Default::default() }, &mut seeded(1)).unwrap();
    println!("encoder held-out {:.5}, affine oracle {:.5}", trained.heldout_loss, ridge);
    // 10 offsets and a 4-dim content space fit inside 16 dims, so an affine
    // map can already remove the offsets exactly; the bound is attainable.
    let bound = 0.05 * cfg.offset_scale.powi(2);
    assert!(ridge < bound);
    assert!(trained.heldout_loss < bound);
    assert!(trained.heldout_loss < 0.5 * trained.initial_loss);
}

/// Identical speakers without offsets: the average is the projection of `x`
/// onto the content subspace, so only observation noise limits the loss.
#[test]
fn offset_free_world_reaches_noise_floor() {
    let cfg = WorldConfig { offset_scale: 0.0, warp_strength: 0.0, seed: 5, ..Default::default() };
    let ds = dataset(cfg.clone());
    let trained = train_encoder(&ds, &EncoderHyper { steps: 2000, ..Default::default() }, &mut seeded(1)).unwrap();
    let floor = cfg.obs_noise.powi(2) * cfg.content_dim as f64 / cfg.feature_dim as f64;
    assert!(trained.heldout_loss < 4.0 * floor + 1e-4, "{} vs floor {floor}", trained.heldout_loss);
    let ridge = ridge_heldout_mse(&ds);
    assert!(ridge < 2.0 * floor, "affine oracle {ridge} vs floor {floor}");

    let test = ds.test_frames().unwrap();
    let enc = encode(&trained.params, &test.xbar0).unwrap();
    let err = enc.sub(&test.xbar0).unwrap().sq_norm() / test.xbar0.len() as f64;
    assert!(err < 4.0 * floor + 1e-4, "clean averages map to themselves: {err}");
}
