//! Cross-module properties checked on random inputs.

use std::sync::Arc;

use homog::cell::{homogenize, homogenized_tensor_1d};
use homog::coeff::{scale_periodic, DiffusionTensor, Evaluator, SampleGrid, TensorField};
use homog::expr::{ScalarFunction, Table};
use homog::fem::{assemble_diffusion, assemble_divergence_load, solve_linear, FemSpace, QuadField};
use homog::mesh::{build_interval_mesh, build_unit_square_mesh};
use proptest::prelude::*;

fn table_field(dim: usize, cells: Vec<usize>, values: Vec<f64>) -> TensorField {
    let s = ScalarFunction::Table(Table::new(cells, values).unwrap());
    TensorField::new(Evaluator::scalar(1, dim, s), false, SampleGrid::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Two phases of equal volume: the effective coefficient is the harmonic mean.
    #[test]
    fn two_phase_harmonic_mean(a in 0.2f64..20.0, b in 0.2f64..20.0, half_res in 2usize..12) {
        let field = table_field(1, vec![2], vec![a, b]);
        let exact = 2.0 / (1.0 / a + 1.0 / b);
        let closed = homogenized_tensor_1d(&field, 2 * half_res).unwrap().get(0, 0, 0, 0);
        let corr = homogenize(&field, 2 * half_res).unwrap().get(0, 0, 0, 0);
        prop_assert!((closed - exact).abs() <= 1e-12 * exact);
        prop_assert!((corr - exact).abs() <= 1e-10 * exact);
    }

    /// Symmetric checkerboards give a symmetric tensor between the harmonic
    /// and arithmetic means of the cell values.
    #[test]
    fn effective_tensor_bounds(v in proptest::collection::vec(0.5f64..8.0, 4)) {
        let field = table_field(2, vec![2, 2], v.clone());
        let t = homogenize(&field, 8).unwrap();
        let harmonic = v.len() as f64 / v.iter().map(|x| 1.0 / x).sum::<f64>();
        let arithmetic = v.iter().sum::<f64>() / v.len() as f64;
        let (a11, a12, a21, a22) = (t.get(0, 0, 0, 0), t.get(0, 0, 0, 1), t.get(0, 0, 1, 0), t.get(0, 0, 1, 1));
        prop_assert!((a12 - a21).abs() <= 1e-10 * a11);
        let tr = a11 + a22;
        let det = a11 * a22 - a12 * a21;
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        let (lo, hi) = (tr / 2.0 - disc, tr / 2.0 + disc);
        prop_assert!(lo >= harmonic * (1.0 - 1e-10), "{lo} < {harmonic}");
        prop_assert!(hi <= arithmetic * (1.0 + 1e-10), "{hi} > {arithmetic}");
    }

    /// Scaling and sampling commute.
    #[test]
    fn scaling_commutes_with_sampling(
        v in proptest::collection::vec(0.5f64..8.0, 4),
        k in 1u32..6,
        x in 0.0f64..1.0,
        y in 0.0f64..1.0,
    ) {
        let field = table_field(2, vec![2, 2], v);
        let eps = 0.5f64.powi(k as i32);
        let scaled = scale_periodic(&field, eps).unwrap();
        let mapped = [(x / eps).fract(), (y / eps).fract()];
        prop_assert_eq!(scaled.eval(&[x, y]).get(0, 0, 0, 0), field.eval(&mapped).get(0, 0, 0, 0));
        prop_assert_eq!(scaled.scale(), Some(eps));
    }

    #[test]
    fn cell_measures_sum_to_one(n in 1usize..40) {
        let i = build_interval_mesh(n).unwrap();
        let s = build_unit_square_mesh(n).unwrap();
        let sum = |m: &homog::mesh::Mesh| (0..m.num_cells()).map(|c| m.cell_measure(c)).sum::<f64>();
        prop_assert!((sum(&i) - 1.0).abs() <= 1e-12);
        prop_assert!((sum(&s) - 1.0).abs() <= 1e-12);
    }

    /// The discrete solution leaves no residual on the free dofs.
    #[test]
    fn galerkin_orthogonality(c in proptest::collection::vec(-2.0f64..2.0, 4), n in 2usize..10) {
        let v = [1.0, 4.0, 2.0, 3.0];
        let field = table_field(2, vec![2, 2], v.to_vec());
        let tensor = scale_periodic(&field, 0.5).unwrap();
        let space = FemSpace::dirichlet(Arc::new(build_unit_square_mesh(2 * n).unwrap()), 1);
        let a = assemble_diffusion(&space, &tensor).unwrap();
        let g = QuadField::from_fn(&space, 2, |x, out| {
            out[0] = c[0] + c[1] * x[1];
            out[1] = c[2] * x[0] * x[0] + c[3];
        });
        let b = assemble_divergence_load(&space, &g).unwrap();
        let u = solve_linear(&space, &a, &b).unwrap();
        let au = a.apply(&u.free_values());
        let r = au.iter().zip(b.values()).map(|(p, q)| (p + q).powi(2)).sum::<f64>().sqrt();
        prop_assert!(r <= 1e-10 * (1.0 + b.euclidean_norm()));
    }
}
