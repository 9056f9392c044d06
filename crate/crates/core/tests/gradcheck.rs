mod support;

use support::{gradcheck, tiny_problem};

#[test]
fn every_parameter_path_matches_finite_differences() {
    for seed in 0..10 {
        let (model, x, y, obj) = tiny_problem(seed);
        let checks = gradcheck(&model, &x, &y, &obj, 1e-5);
        assert_eq!(checks.len(), model.params.len());
        for c in &checks {
            assert!(
                c.rel_error < 1e-4,
                "seed {seed} ({:?}): {} relative error {:.3e}",
                model.config.fusion,
                c.path,
                c.rel_error
            );
        }
    }
}

#[test]
fn gradients_stay_finite_for_extreme_inputs() {
    let (model, x, y, obj) = tiny_problem(42);
    let big = tabnsa::Tensor::from_fn(x.shape().to_vec(), |i| if i % 2 == 0 { 1e6 } else { -1e6 });
    for input in [x, big] {
        let (loss, grads) = tabnsa::training::loss_and_grads(&model, &input, &y, &obj).unwrap();
        assert!(loss.is_finite());
        assert!(grads.iter().all(|g| g.all_finite()));
    }
}
