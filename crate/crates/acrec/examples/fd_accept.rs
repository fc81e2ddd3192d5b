use acrec::datapipe::MaskMode;
use acrec::grad::{check_instance, fd_check, FD_EPSILON};
use acrec::model::Variant;

fn main() {
    let mut worst = 0.0f64;
    let mut fails = 0;
    for seed in 0..10u64 {
        let (params, seq) = check_instance(50, 8, 8, 6, seed);
        for variant in Variant::ALL {
            for mode in [MaskMode::All, MaskMode::ClicksOnly] {
                let mask = mode.mask_for(&seq);
                let err = fd_check(&params, &seq, variant, &mask, FD_EPSILON).unwrap();
                if err >= 1e-4 { fails += 1; }
                if err > worst { worst = err; }
                println!("seed {seed} {variant:?} {mode:?}: {err:.3e}");
            }
        }
    }
    println!("=== worst {worst:.3e}, fails {fails}/80");
}
