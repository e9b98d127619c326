mod common;

use common::*;
use voxrecon::renderer::GradientEstimator;

const SEEDS: [u64; 3] = [1, 2, 3];

#[test]
fn analytical_gradient_matches_position_differences() {
    for seed in SEEDS {
        let e = oracle_analytical_gradient(seed);
        assert!(e < 1e-3, "seed {seed}: {e:e}");
    }
}

#[test]
fn interpolated_gradient_backprop_matches_fd() {
    for seed in SEEDS {
        let e = oracle_interpolated_backprop(seed);
        assert!(e < 1e-3, "seed {seed}: {e:e}");
    }
}

#[test]
fn eikonal_gradient_matches_fd() {
    for seed in SEEDS {
        let e = oracle_eikonal(seed);
        assert!(e < 1e-5, "seed {seed}: {e:e}");
    }
}

#[test]
fn curvature_gradient_matches_fd() {
    for seed in SEEDS {
        let e = oracle_curvature(seed);
        assert!(e < 1e-5, "seed {seed}: {e:e}");
    }
}

#[test]
fn render_backprop_matches_fd_for_every_variant() {
    for seed in SEEDS {
        for est in [GradientEstimator::Interpolated, GradientEstimator::Analytical] {
            for normalize in [true, false] {
                let o = oracle_render_backprop(seed, est, normalize);
                assert!(o.worst() < 1e-3, "seed {seed} {est:?} normalize={normalize}: {o:?}");
            }
        }
    }
}

#[test]
fn radiance_backprop_matches_fd() {
    for seed in SEEDS {
        let e = oracle_radiance_backprop(seed);
        assert!(e < 1e-3, "seed {seed}: {e:e}");
    }
}
