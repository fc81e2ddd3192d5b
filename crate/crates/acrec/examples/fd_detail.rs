use acrec::datapipe::MaskMode;
use acrec::grad::{backward, check_instance, loss_only};
use acrec::model::{Variant, TENSOR_NAMES};

fn worst_coord(seed: u64, variant: Variant, mode: MaskMode) {
    let (params, seq) = check_instance(50, 8, 8, 6, seed);
    let mask = mode.mask_for(&seq);
    let (_, grads) = backward(&params, &seq, variant, &mask).unwrap();
    let analytic = grads.flat();
    let eps = 1e-5;
    let mut worst = (0.0f64, 0usize, 0usize, 0.0, 0.0);
    for ti in 0..13 {
        for j in 0..analytic[ti].len() {
            let a = analytic[ti][j];
            let mut plus = params.clone();
            plus.flat_mut()[ti][j] += eps;
            let lp = loss_only(&plus, &seq, variant, &mask).unwrap();
            let mut minus = params.clone();
            minus.flat_mut()[ti][j] -= eps;
            let lm = loss_only(&minus, &seq, variant, &mask).unwrap();
            let f = (lp - lm) / (2.0 * eps);
            let rel = (a - f).abs() / f64::max(1e-8, a.abs() + f.abs());
            if rel > worst.0 { worst = (rel, ti, j, a, f); }
        }
    }
    println!("seed {seed} {variant:?} {mode:?}: rel {:.3e} tensor {} idx {} a={:.3e} f={:.3e}",
        worst.0, TENSOR_NAMES[worst.1], worst.2, worst.3, worst.4);
}

fn main() {
    worst_coord(61, Variant::Early, MaskMode::ClicksOnly);
    worst_coord(98, Variant::Early, MaskMode::All);
    worst_coord(95, Variant::Early, MaskMode::ClicksOnly);
    worst_coord(90, Variant::Early, MaskMode::All);
}
