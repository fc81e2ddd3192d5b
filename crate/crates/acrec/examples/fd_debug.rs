use acrec::datapipe::MaskMode;
use acrec::grad::{check_instance, fd_check, FD_EPSILON};
use acrec::model::Variant;

fn main() {
    let mut global_worst = (0.0f64, String::new());
    let mut over_5e5 = 0;
    let mut over_1e4 = 0;
    for seed in 0..100u64 {
        let (params, seq) = check_instance(50, 8, 8, 6, seed);
        for variant in Variant::ALL {
            for mode in [MaskMode::All, MaskMode::ClicksOnly] {
                let mask = mode.mask_for(&seq);
                if !mask.iter().any(|&b| b) { println!("seed {seed} {variant:?} {mode:?}: EMPTY MASK"); continue; }
                let err = fd_check(&params, &seq, variant, &mask, FD_EPSILON).unwrap();
                if err > global_worst.0 {
                    global_worst = (err, format!("seed {seed} {variant:?} {mode:?}"));
                }
                if err > 5e-5 { over_5e5 += 1; println!("seed {seed} {variant:?} {mode:?}: {err:.2e}"); }
                if err > 1e-4 { over_1e4 += 1; }
            }
        }
    }
    println!("over 5e-5: {over_5e5}/800, over 1e-4: {over_1e4}/800");
    println!("WORST: {:.3e} at {}", global_worst.0, global_worst.1);
}
