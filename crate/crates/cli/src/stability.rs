use serde_json::{json, Value};

use photonsource::stability::generate_stability_dataset;

use crate::config::ExperimentConfig;
use crate::output::Output;

pub fn run(cfg: &ExperimentConfig, o: &mut Output) -> anyhow::Result<Value> {
    let mut tl = generate_stability_dataset(&cfg.stability, &cfg.device)?;
    tl.analyze();
    o.file("timeline.csv", |w| Ok(tl.write_csv(w)?))?;

    let failed: Vec<usize> = tl.slots.iter().filter(|s| s.error.is_some()).map(|s| s.index).collect();
    if !failed.is_empty() {
        o.warn(format!("{} slots could not be analysed", failed.len()));
    }
    let interleaved = tl.slots.iter().enumerate().all(|(i, s)| s.flux_point_id == i % 2);
    if !interleaved {
        o.warn("slots do not alternate between the two flux points");
    }

    let mut points = Vec::new();
    for id in 0..2 {
        let slots: Vec<_> = tl.slots.iter().filter(|s| s.flux_point_id == id).collect();
        let eta: Vec<f64> = slots.iter().filter_map(|s| s.estimate.as_ref()).map(|e| e.eta_p).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        points.push(json!({
            "flux": cfg.stability.flux_points[id],
            "nominal_frequency": tl.nominal_freqs[id],
            "slots": slots.len(),
            "eta_p_mean": mean(&eta),
            "eta_p_max": eta.iter().copied().fold(f64::NAN, f64::max),
            "true_eta_p_max": slots.iter().map(|s| s.truth.eta_p).fold(f64::NAN, f64::max),
        }));
    }
    let (hit2, total) = tl.coverage(2.0);
    let (hit3, _) = tl.coverage(3.0);
    Ok(json!({
        "slots": tl.slots.len(),
        "t_phase": tl.t_phase,
        "interleaved": interleaved,
        "failed_slots": failed,
        "coverage_2sigma": hit2 as f64 / total.max(1) as f64,
        "coverage_3sigma": hit3 as f64 / total.max(1) as f64,
        "estimates": total,
        "flux_points": points,
    }))
}
