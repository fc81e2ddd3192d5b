use std::time::Instant;
use acrec::datapipe::{build_vocab, encode_corpus, split};
use acrec::eval::evaluate;
use acrec::model::Variant;
use acrec::numkernel::Rng;
use acrec::synth::{generate, SynthConfig};
use acrec::train::{train, TrainConfig};

fn main() {
    let t0 = Instant::now();
    let synth_cfg = SynthConfig {
        catalog: 1000,
        n_sessions: 20_000,
        rec_rate: 0.1,
        slate_size: 5,
        p_follow: 0.8,
        seed: 20_260_810,
        ..Default::default()
    };
    let (sessions, _) = generate(&synth_cfg).unwrap();
    let vocab = build_vocab(&sessions, 10).unwrap();
    let encoded = encode_corpus(&sessions, &vocab, 40, 5);
    let (train_set, valid_set) = split(encoded, 0.2, &mut Rng::new(99).derive(2));
    println!("gen+encode: {:.1}s  V_x={} train={} valid={}", t0.elapsed().as_secs_f64(), vocab.len(), train_set.len(), valid_set.len());

    let mut reports = Vec::new();
    for variant in [Variant::Navigation, Variant::Late, Variant::Clicks, Variant::Early] {
        let tv = Instant::now();
        let mut cfg = TrainConfig::new(variant);
        cfg.iterations = 2000;
        cfg.seed = 7;
        let out = train(&cfg, vocab.len(), &train_set, &valid_set, None).unwrap();
        let (_, report) = evaluate(&out.params, variant, &valid_set, 10, &mut Rng::new(5));
        println!("{} trained in {:.1}s", variant.name(), tv.elapsed().as_secs_f64());
        print!("{}", report.to_text(variant.name()));
        reports.push((variant, report));
    }

    let nav = &reports[0].1;
    let late = &reports[1].1;
    let clicks = &reports[2].1;
    let (nv, nc) = (nav.view.unwrap(), nav.click.unwrap());
    let (lv, lc) = (late.view.unwrap(), late.click.unwrap());
    println!("\n5a nav.click {} < nav.view {} : {}", nc.precision, nv.precision, nc.precision < nv.precision);
    println!("5b late.click {} >= 1.2*nav.click {} : {}", lc.precision, 1.2 * nc.precision, lc.precision >= 1.2 * nc.precision);
    println!("5c late.view {} in nav view CI [{}, {}] : {}", lv.precision, nv.ci.0, nv.ci.1, lv.precision >= nv.ci.0 && lv.precision <= nv.ci.1);
    println!("6  clicks.global {} < late.global {} : {}", clicks.global.unwrap().precision, late.global.unwrap().precision, clicks.global.unwrap().precision < late.global.unwrap().precision);
    println!("total: {:.1}s", t0.elapsed().as_secs_f64());
}
