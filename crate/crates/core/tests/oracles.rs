//! Closed-form cases checked through the public API.

use jkoflow_core::datasets::Standardizer;
use jkoflow_core::mmd::{median_bandwidth, mmd2};
use jkoflow_core::net::affine_params;
use jkoflow_core::objective::{block_loss, Batch};
use jkoflow_core::ode::{integrate_block, ProbeSeed};
use jkoflow_core::trajectory::{prox_step, refine_steps, reparameterize_steps, LabPotential, ProxSolver};
use jkoflow_core::{ArchSpec, BlockInterval, FlowNetwork, IntegratorConfig, Mat, Potential, ResidualVectorField};

const E_INV: f64 = 0.367_879_441_171_442_3;

fn linear_block(a: f64, h: f64) -> ResidualVectorField {
    let arch = ArchSpec::mlp(1, 8);
    let p = affine_params(&arch, &Mat::from_rows(&[[a]]).unwrap(), &[0.0]).unwrap();
    ResidualVectorField::new(arch, p, BlockInterval::new(0.0, h).unwrap()).unwrap()
}

fn one_block_flow(a: f64, substeps: usize) -> FlowNetwork {
    let integrator = IntegratorConfig {
        substeps,
        ..IntegratorConfig::for_dim(1)
    };
    let mut flow = FlowNetwork::empty(ArchSpec::mlp(1, 8), Standardizer::identity(1), Potential::StandardGaussian, integrator);
    flow.blocks.push(linear_block(a, 1.0));
    flow
}

#[test]
fn ou_block_matches_the_analytic_flow() {
    let block = linear_block(-1.0, 1.0);
    // 4 substeps leave an RK4 error of 1.5e-5 at this step length
    let cfg = IntegratorConfig {
        substeps: 5,
        ..IntegratorConfig::for_dim(1)
    };
    let x0 = Mat::from_rows(&[[1.0]]).unwrap();
    let s = integrate_block(&block, block.interval, &x0, &cfg, ProbeSeed::new(0)).unwrap();
    assert!((s.x.get(0, 0) - E_INV).abs() < 1e-5, "{}", s.x.get(0, 0));
    assert!((s.ell[0] + 1.0).abs() < 1e-5, "{}", s.ell[0]);

    let (z, ell) = one_block_flow(-1.0, 5).encode(&x0).unwrap();
    assert!((z.get(0, 0) - E_INV).abs() < 1e-5);
    assert!((ell[0] + 1.0).abs() < 1e-5);
}

#[test]
fn ou_block_loss_by_hand() {
    let block = linear_block(-1.0, 1.0);
    let cfg = IntegratorConfig {
        substeps: 8,
        ..IntegratorConfig::for_dim(1)
    };
    let batch = Batch::unlabeled(Mat::from_rows(&[[2.0]]).unwrap());
    let b = block_loss(&block, block.interval, &batch, &Potential::StandardGaussian, &cfg, ProbeSeed::new(0)).unwrap();
    let x1 = 2.0 * E_INV;
    let expected = 0.5 * x1 * x1 + 1.0 + 0.5 * (2.0 - x1).powi(2);
    assert!((b.total - expected).abs() < 1e-5, "{} vs {expected}", b.total);
    assert!((b.w2_term - 0.5 * (2.0 - x1).powi(2)).abs() < 1e-5);
}

#[test]
fn halving_flow_log_likelihood() {
    let ln2 = core::f64::consts::LN_2;
    let flow = one_block_flow(-ln2, 16);
    let x = Mat::from_rows(&[[2.0]]).unwrap();
    let ll = flow.log_likelihood(&Batch::unlabeled(x)).unwrap();
    let expected = -0.5 * (1.0 + (2.0 * core::f64::consts::PI).ln()) - ln2;
    assert!((ll[0] - expected).abs() < 1e-5, "{} vs {expected}", ll[0]);
    assert!((expected + 2.112086).abs() < 1e-6);

    let empty = FlowNetwork::empty(ArchSpec::mlp(2, 8), Standardizer::identity(2), Potential::StandardGaussian, IntegratorConfig::for_dim(2));
    let ll = empty.log_likelihood(&Batch::unlabeled(Mat::zeros(1, 2))).unwrap();
    assert!((ll[0] + 1.837877).abs() < 1e-6);
}

#[test]
fn step_updates_by_hand() {
    let h = reparameterize_steps(&[4.0, 2.0, 2.0], &[1.0; 3], 0.5, 10.0).unwrap();
    let want = [5.0 / 6.0, 7.0 / 6.0, 7.0 / 6.0];
    for (a, b) in h.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(reparameterize_steps(&[2.0; 3], &[0.3, 0.5, 0.7], 0.5, 10.0).unwrap(), vec![0.3, 0.5, 0.7]);
    assert_eq!(reparameterize_steps(&[10.0, 1.0], &[1.0, 1.0], 0.5, 1.2).unwrap()[1], 1.2);
    assert_eq!(refine_steps(&[0.75, 0.9]), vec![0.375, 0.375, 0.45, 0.45]);
}

#[test]
fn quadratic_prox_step_is_a_contraction() {
    let s = prox_step(LabPotential::Quadratic, &[2.0, 0.0], 1.0, None, &ProxSolver::default()).unwrap();
    assert!(s.converged);
    assert!((s.x[0] - 1.0).abs() < 1e-6 && s.x[1].abs() < 1e-6, "{:?}", s.x);
}

#[test]
fn mmd_closed_forms() {
    let h = 0.7;
    let x = Mat::zeros(1, 2);
    let y = Mat::from_rows(&[[h, h]]).unwrap();
    let v = mmd2(&x, &y, h).unwrap();
    assert!((v - (2.0 - 2.0 * (-1.0f64).exp())).abs() < 1e-6, "{v}");

    let same = Mat::from_rows(&[[0.3, 1.0], [2.0, -1.0]]).unwrap();
    assert_eq!(mmd2(&same, &same, 1.0).unwrap(), 0.0);

    let pts = Mat::from_rows(&[[0.0], [1.0], [3.0]]).unwrap();
    assert_eq!(median_bandwidth(&pts, None, 0).unwrap(), 2.0);
}

#[test]
fn standardizer_by_hand() {
    let x = Mat::from_rows(&[[0.0], [2.0]]).unwrap();
    let s = Standardizer::fit(&x).unwrap();
    assert_eq!(s.apply(&x).unwrap().as_slice(), &[-1.0, 1.0]);
    let back = s.invert(&s.apply(&x).unwrap()).unwrap();
    assert!(back.as_slice().iter().zip(x.as_slice()).all(|(a, b)| (a - b).abs() <= 1e-12));
}
