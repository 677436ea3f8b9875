use tup_core::model::VariantKind;
use tup_core::synth::{self, SynthConfig};

// Mean short-profile weight must be higher for users whose interests moved.
#[test]
fn attention_favours_short_profile_after_drift() {
    let data = SynthConfig::default();
    let mut config = synth::reference_pipeline_config();
    config.variants = vec![VariantKind::Full];
    config.popularity = false;
    config.mf = false;
    let dataset = synth::generate(&data).unwrap();
    let (_, outcome) = synth::run_drift_experiment(&data, &config).unwrap();
    let attention = &outcome.runs["full"].attention;

    let (mut drifting, mut stationary) = (Vec::new(), Vec::new());
    for user in &dataset.users {
        let (short, _) = attention[&user.user_id];
        if user.drifts() {
            drifting.push(short);
        } else {
            stationary.push(short);
        }
    }
    assert!(!drifting.is_empty() && !stationary.is_empty());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (d, s) = (mean(&drifting), mean(&stationary));
    assert!(d > s, "mean alpha_short: drifting {d:.4} <= stationary {s:.4}");
}
